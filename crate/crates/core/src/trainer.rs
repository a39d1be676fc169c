//! Desk-scale teacher-student training loop.
//!
//! A hidden masked layer with frozen random masks generates regression
//! targets; students of every variant fit them with AdamW under decoupled
//! weight decay (mask logits exempt) and straight-through mask updates.
//! Everything is keyed off one seed and reduces in a fixed order, so a
//! config reproduces its report bit for bit.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autograd::{
    ablation_backward_with_masks, fold_output, glu_backward, mglu_backward_with_masks, GradBundle,
};
use crate::error::{MgluError, Result};
use crate::layer::MgluLayer;
use crate::real::Real;
use crate::reference::{glu_forward, AblationVariant, FfnPath};
use crate::tensor::{DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Learned,
    Fixed,
}

/// Which layer family the student trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainVariant {
    Glu,
    Mglu,
    Ablation { kind: AblationVariant },
    Topk { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub d: usize,
    pub out: usize,
}

fn default_activation() -> Activation {
    Activation::Swish
}

fn default_n_samples() -> usize {
    512
}

fn default_noise_std() -> f64 {
    0.01
}

fn default_record_every() -> usize {
    20
}

fn default_mask_lr_mult() -> f64 {
    1.0
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// (beta1, beta2) of the AdamW moments.
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub mask_mode: MaskMode,
    pub variant: TrainVariant,
    pub n_m: usize,
    pub dims: Dims,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Optional faster schedule for the mask logits.
    #[serde(default = "default_mask_lr_mult")]
    pub mask_lr_mult: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Stop updating mask logits from this step on.
    #[serde(default)]
    pub freeze_masks_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 64,
            lr: 3e-3,
            betas: [0.9, 0.99],
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_fraction: 0.1,
            schedule: Schedule::Cosine,
            mask_mode: MaskMode::Learned,
            variant: TrainVariant::Mglu,
            n_m: 2,
            dims: Dims {
                h: 32,
                d: 128,
                out: 8,
            },
            activation: Activation::Swish,
            n_samples: default_n_samples(),
            noise_std: default_noise_std(),
            record_every: default_record_every(),
            mask_lr_mult: default_mask_lr_mult(),
            grad_clip: default_grad_clip(),
            freeze_masks_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(MgluError::InvalidTrainConfig(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(MgluError::InvalidTrainConfig(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || self.n_samples == 0 {
            return Err(MgluError::InvalidTrainConfig(
                "steps, batch_size, n_samples must be positive".into(),
            ));
        }
        if self.dims.h == 0 || self.dims.d == 0 || self.dims.out == 0 {
            return Err(MgluError::InvalidTrainConfig("dims must be positive".into()));
        }
        match self.variant {
            TrainVariant::Glu => {}
            TrainVariant::Mglu => {
                if self.n_m == 0 || self.n_m > 16 {
                    return Err(MgluError::InvalidTrainConfig(format!(
                        "n_m {} outside 1..=16",
                        self.n_m
                    )));
                }
            }
            TrainVariant::Ablation { .. } => {
                if self.n_m != 1 {
                    return Err(MgluError::InvalidTrainConfig(
                        "ablation variants are single-mask (n_m = 1)".into(),
                    ));
                }
            }
            TrainVariant::Topk { k } => {
                if k == 0 || k > self.n_m {
                    return Err(MgluError::InvalidTrainConfig(format!(
                        "top-k K={k} outside 1..=n_m={}",
                        self.n_m
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Regression dataset generated by a hidden teacher layer.
#[derive(Debug, Clone)]
pub struct SyntheticTask<T> {
    pub inputs: Vec<DenseVector<T>>,
    pub targets: Vec<DenseVector<T>>,
    /// The generating layer, kept for exact-fit tests.
    pub teacher: MgluLayer<T>,
}

/// Deterministic teacher-student task: standard-normal inputs through a
/// two-mask teacher with frozen fair-coin masks, plus N(0, 0.01^2) noise.
pub fn make_synthetic_task<T: Real>(
    seed: u64,
    n_samples: usize,
    h: usize,
    out: usize,
) -> SyntheticTask<T> {
    make_synthetic_task_with(seed, n_samples, h, out, default_noise_std())
}

pub fn make_synthetic_task_with<T: Real>(
    seed: u64,
    n_samples: usize,
    h: usize,
    out: usize,
    noise_std: f64,
) -> SyntheticTask<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_teacher = 2 * h;
    let mut teacher = MgluLayer::<T>::random(h, d_teacher, 2, Activation::Swish, &mut rng)
        .expect("teacher dims valid");
    teacher.freeze_random_masks(&mut rng);
    let teacher = teacher.with_random_output(out, &mut rng);

    let mut inputs = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = DenseVector::<T>::random_normal(h, 1.0, &mut rng);
        let clean = crate::reference::ffn_forward(&x, &teacher, FfnPath::Naive)
            .expect("teacher forward");
        let noise = DenseVector::<T>::random_normal(out, noise_std, &mut rng);
        let y = DenseVector::from_vec(
            clean
                .as_slice()
                .iter()
                .zip(noise.as_slice())
                .map(|(c, n)| *c + *n)
                .collect(),
        )
        .expect("finite targets");
        inputs.push(x);
        targets.push(y);
    }
    SyntheticTask {
        inputs,
        targets,
        teacher,
    }
}

/// Per-mask fraction of logits binarized to the gate pathway. Element-wise
/// fractions over the full mask.
pub fn mask_gate_ratio<T: Real>(layer: &MgluLayer<T>) -> Vec<f64> {
    layer.gate_ratios()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub recorded_steps: Vec<usize>,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    /// Gate ratios per recorded step (empty per step for the glu variant).
    pub mask_stats_curve: Vec<Vec<f64>>,
    pub diverged: bool,
    /// Steps whose batch loss exceeded 1.5x the previous step's.
    pub loss_spikes: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Stable serialization with the wall clock left out, safe to compare
    /// byte-for-byte across runs.
    pub fn canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            recorded_steps: &'a [usize],
            loss_curve: &'a [f64],
            final_loss: f64,
            mask_stats_curve: &'a [Vec<f64>],
            diverged: bool,
            loss_spikes: usize,
        }
        serde_json::to_string_pretty(&Canonical {
            recorded_steps: &self.recorded_steps,
            loss_curve: &self.loss_curve,
            final_loss: self.final_loss,
            mask_stats_curve: &self.mask_stats_curve,
            diverged: self.diverged,
            loss_spikes: self.loss_spikes,
        })
        .expect("report serializes")
    }
}

enum Student<T: Real> {
    Glu {
        w_g: DenseMatrix<T>,
        w_v: DenseMatrix<T>,
        w_o: DenseMatrix<T>,
        activation: Activation,
    },
    Masked {
        layer: MgluLayer<T>,
        ablation: Option<AblationVariant>,
    },
}

enum StudentGrads<T: Real> {
    Glu {
        d_wg: DenseMatrix<T>,
        d_wv: DenseMatrix<T>,
        d_wo: DenseMatrix<T>,
    },
    Masked(GradBundle<T>),
}

impl<T: Real> StudentGrads<T> {
    fn accumulate(&mut self, other: &StudentGrads<T>) {
        match (self, other) {
            (
                StudentGrads::Glu { d_wg, d_wv, d_wo },
                StudentGrads::Glu {
                    d_wg: og,
                    d_wv: ov,
                    d_wo: oo,
                },
            ) => {
                for (a, b) in d_wg.as_mut_slice().iter_mut().zip(og.as_slice()) {
                    *a += *b;
                }
                for (a, b) in d_wv.as_mut_slice().iter_mut().zip(ov.as_slice()) {
                    *a += *b;
                }
                for (a, b) in d_wo.as_mut_slice().iter_mut().zip(oo.as_slice()) {
                    *a += *b;
                }
            }
            (StudentGrads::Masked(a), StudentGrads::Masked(b)) => a.accumulate(b),
            _ => unreachable!("mixed student grads"),
        }
    }

    fn global_norm(&self) -> f64 {
        let mut acc = 0f64;
        let mut add = |s: &[T]| {
            for v in s {
                let x = v.as_f64();
                acc += x * x;
            }
        };
        match self {
            StudentGrads::Glu { d_wg, d_wv, d_wo } => {
                add(d_wg.as_slice());
                add(d_wv.as_slice());
                add(d_wo.as_slice());
            }
            StudentGrads::Masked(b) => {
                add(b.d_x.as_slice());
                add(b.d_w.as_slice());
                add(b.d_logits.as_slice());
                if let Some(w_o) = &b.d_w_o {
                    add(w_o.as_slice());
                }
                if let Some(w_r) = &b.d_w_r {
                    add(w_r.as_slice());
                }
            }
        }
        acc.sqrt()
    }
}

/// Moments for one parameter block; step count is shared by the caller.
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &mut self,
        params: &mut [T],
        grads: &[T],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        step: usize,
        grad_scale: f64,
    ) {
        let b1 = T::lit(beta1);
        let b2 = T::lit(beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - beta1.powi(step as i32));
        let corr2 = T::lit(1.0 - beta2.powi(step as i32));
        let lr_t = T::lit(lr);
        let eps_t = T::lit(eps);
        let wd = T::lit(weight_decay);
        let gs = T::lit(grad_scale);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = *g * gs;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            // Decoupled decay: applied to the parameter, not the gradient.
            *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps_t) + wd * *p);
        }
    }
}

fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    let warmup = (config.warmup_fraction * config.steps as f64).round() as usize;
    if step < warmup {
        return config.lr * (step + 1) as f64 / warmup.max(1) as f64;
    }
    match config.schedule {
        Schedule::Constant => config.lr,
        Schedule::Cosine => {
            // Cosine decay to a 10% floor after warmup.
            let span = (config.steps - warmup).max(1) as f64;
            let progress = (step - warmup) as f64 / span;
            let min_lr = 0.1 * config.lr;
            min_lr + 0.5 * (config.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

fn build_student<T: Real>(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Student<T>> {
    let Dims { h, d, out } = config.dims;
    match config.variant {
        TrainVariant::Glu => {
            let std = 1.0 / (h as f64).sqrt();
            Ok(Student::Glu {
                w_g: DenseMatrix::random_normal(h, d, std, rng),
                w_v: DenseMatrix::random_normal(h, d, std, rng),
                w_o: DenseMatrix::random_normal(d, out, 1.0 / (d as f64).sqrt(), rng),
                activation: config.activation,
            })
        }
        TrainVariant::Mglu | TrainVariant::Ablation { .. } | TrainVariant::Topk { .. } => {
            let mut layer = MgluLayer::<T>::random(h, d, config.n_m, config.activation, rng)?;
            if config.mask_mode == MaskMode::Fixed {
                layer.freeze_random_masks(rng);
            }
            let mut layer = layer.with_random_output(out, rng);
            if let TrainVariant::Topk { k } = config.variant {
                layer = layer.with_random_router(k, rng)?;
            }
            let ablation = match config.variant {
                TrainVariant::Ablation { kind } => Some(kind),
                _ => None,
            };
            Ok(Student::Masked { layer, ablation })
        }
    }
}

/// Per-sample loss and gradient. Upstream is d(mean MSE)/d(pred) already
/// scaled by the batch size.
fn sample_grad<T: Real>(
    student: &Student<T>,
    masks: &[crate::masks::BinaryMask],
    x: &DenseVector<T>,
    y: &DenseVector<T>,
    batch_size: usize,
) -> (f64, StudentGrads<T>) {
    let out_len = y.len();
    let scale = 2.0 / (out_len as f64 * batch_size as f64);
    match student {
        Student::Glu {
            w_g,
            w_v,
            w_o,
            activation,
        } => {
            let mid = glu_forward(x, w_g, w_v, *activation).expect("student dims");
            let pred = w_o.vec_mat(mid.as_slice());
            let (loss, upstream) = loss_and_upstream(&pred, y.as_slice(), scale);
            let (d_mid, d_wo) = fold_output(mid.as_slice(), w_o, &upstream);
            let d_mid = DenseVector::from_vec(d_mid).expect("finite");
            let (_, d_wg, d_wv) =
                glu_backward(x, w_g, w_v, *activation, &d_mid).expect("student dims");
            (loss, StudentGrads::Glu { d_wg, d_wv, d_wo })
        }
        Student::Masked { layer, ablation } => {
            let w_o = layer.w_o().expect("student has W_o");
            let mid = match ablation {
                Some(kind) => crate::reference::mglu_ablation_forward(
                    x,
                    layer.w(),
                    &masks[0],
                    *kind,
                    layer.activation(),
                )
                .expect("student dims"),
                None => match layer.router() {
                    Some(router) => crate::reference::mglu_topk_forward(x, layer, router.k)
                        .expect("student dims"),
                    None => {
                        crate::reference::mglu_forward_naive(x, layer.w(), masks, layer.activation())
                            .expect("student dims")
                    }
                },
            };
            let pred = w_o.vec_mat(mid.as_slice());
            let (loss, upstream) = loss_and_upstream(&pred, y.as_slice(), scale);
            let up = DenseVector::from_vec(upstream).expect("finite upstream");
            let bundle = match ablation {
                Some(kind) => {
                    ablation_backward_with_masks(x, layer, masks, *kind, &up)
                        .expect("student dims")
                        .0
                }
                None => mglu_backward_with_masks(x, layer, masks, &up).expect("student dims").0,
            };
            (loss, StudentGrads::Masked(bundle))
        }
    }
}

fn loss_and_upstream<T: Real>(pred: &[T], target: &[T], scale: f64) -> (f64, Vec<T>) {
    let mut loss = 0f64;
    let mut upstream = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let e = p.as_f64() - t.as_f64();
        loss += e * e;
        upstream.push(T::lit(e * scale));
    }
    (loss / pred.len() as f64, upstream)
}

fn student_forward<T: Real>(
    student: &Student<T>,
    masks: &[crate::masks::BinaryMask],
    x: &DenseVector<T>,
) -> Vec<T> {
    match student {
        Student::Glu {
            w_g,
            w_v,
            w_o,
            activation,
        } => {
            let mid = glu_forward(x, w_g, w_v, *activation).expect("student dims");
            w_o.vec_mat(mid.as_slice())
        }
        Student::Masked { layer, ablation } => {
            let mid = match ablation {
                Some(kind) => crate::reference::mglu_ablation_forward(
                    x,
                    layer.w(),
                    &masks[0],
                    *kind,
                    layer.activation(),
                )
                .expect("student dims"),
                None => match layer.router() {
                    Some(router) => crate::reference::mglu_topk_forward(x, layer, router.k)
                        .expect("student dims"),
                    None => crate::reference::mglu_forward_naive(
                        x,
                        layer.w(),
                        masks,
                        layer.activation(),
                    )
                    .expect("student dims"),
                },
            };
            layer.w_o().expect("student has W_o").vec_mat(mid.as_slice())
        }
    }
}

/// Mean MSE over a fixed prefix of the dataset; what the loss curve records.
fn eval_loss<T: Real>(student: &Student<T>, task: &SyntheticTask<T>, limit: usize) -> f64 {
    let masks = match student {
        Student::Masked { layer, .. } => layer.binarized(),
        Student::Glu { .. } => Vec::new(),
    };
    let n = task.inputs.len().min(limit);
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let pred = student_forward(student, &masks, &task.inputs[i]);
            let mut loss = 0f64;
            for (p, t) in pred.iter().zip(task.targets[i].as_slice()) {
                let e = p.as_f64() - t.as_f64();
                loss += e * e;
            }
            loss / pred.len() as f64
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    total / n as f64
}

/// Size of the fixed evaluation prefix.
const EVAL_LIMIT: usize = 128;

/// Run the optimization loop. On a non-finite batch loss the loop aborts and
/// the report carries everything recorded so far with `diverged` set.
pub fn train<T: Real>(config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let started = Instant::now();

    let task: SyntheticTask<T> = make_synthetic_task_with(
        config.seed,
        config.n_samples,
        config.dims.h,
        config.dims.out,
        config.noise_std,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe_f00d_u64);
    let mut student: Student<T> = build_student(config, &mut rng)?;

    let [beta1, beta2] = config.betas;
    let mut adam_w;
    let mut adam_wv = None;
    let mut adam_wo;
    let mut adam_logits = None;
    let mut adam_wr = None;
    match &student {
        Student::Glu { w_g, w_v, w_o, .. } => {
            adam_w = AdamState::<T>::new(w_g.as_slice().len());
            adam_wv = Some(AdamState::<T>::new(w_v.as_slice().len()));
            adam_wo = AdamState::<T>::new(w_o.as_slice().len());
        }
        Student::Masked { layer, .. } => {
            adam_w = AdamState::<T>::new(layer.w().as_slice().len());
            adam_wo = AdamState::<T>::new(layer.w_o().unwrap().as_slice().len());
            adam_logits = Some(AdamState::<T>::new(layer.mask_logits().as_slice().len()));
            if let Some(router) = layer.router() {
                adam_wr = Some(AdamState::<T>::new(router.w_r.as_slice().len()));
            }
        }
    }

    let mut recorded_steps = Vec::new();
    let mut loss_curve = Vec::new();
    let mut mask_stats_curve = Vec::new();
    let mut loss_spikes = 0usize;
    let mut prev_loss = f64::INFINITY;
    let mut diverged = false;
    let mut last_loss = f64::NAN;
    let mut completed_steps = 0usize;

    for step in 0..config.steps {
        completed_steps = step;
        let batch: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..config.n_samples))
            .collect();

        // Masks are constant within a step; binarize once.
        let masks = match &student {
            Student::Masked { layer, .. } => layer.binarized(),
            Student::Glu { .. } => Vec::new(),
        };

        // Fan out over samples, reduce in index order for determinism.
        let per_sample: Vec<(f64, StudentGrads<T>)> = batch
            .par_iter()
            .map(|&idx| sample_grad(&student, &masks, &task.inputs[idx], &task.targets[idx], config.batch_size))
            .collect();
        let mut iter = per_sample.into_iter();
        let (mut batch_loss, mut grads) = iter.next().expect("batch_size > 0");
        for (loss, g) in iter {
            batch_loss += loss;
            grads.accumulate(&g);
        }
        batch_loss /= config.batch_size as f64;
        last_loss = batch_loss;

        if !batch_loss.is_finite() {
            diverged = true;
            break;
        }
        if batch_loss > 1.5 * prev_loss {
            loss_spikes += 1;
        }
        prev_loss = batch_loss;

        if step % config.record_every == 0 {
            recorded_steps.push(step);
            loss_curve.push(eval_loss(&student, &task, EVAL_LIMIT));
            mask_stats_curve.push(match &student {
                Student::Masked { layer, .. } => layer.gate_ratios(),
                Student::Glu { .. } => Vec::new(),
            });
        }

        let lr = lr_at(config, step);
        let grad_scale = match config.grad_clip {
            Some(clip) => {
                let norm = grads.global_norm();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = step + 1;
        let wd = config.weight_decay;
        let masks_trainable = config.mask_mode == MaskMode::Learned
            && config.freeze_masks_at.is_none_or(|at| step < at);

        match (&mut student, &grads) {
            (
                Student::Glu { w_g, w_v, w_o, .. },
                StudentGrads::Glu { d_wg, d_wv, d_wo },
            ) => {
                adam_w.update(
                    w_g.as_mut_slice(),
                    d_wg.as_slice(),
                    lr,
                    beta1,
                    beta2,
                    config.eps,
                    wd,
                    t,
                    grad_scale,
                );
                adam_wv.as_mut().unwrap().update(
                    w_v.as_mut_slice(),
                    d_wv.as_slice(),
                    lr,
                    beta1,
                    beta2,
                    config.eps,
                    wd,
                    t,
                    grad_scale,
                );
                adam_wo.update(
                    w_o.as_mut_slice(),
                    d_wo.as_slice(),
                    lr,
                    beta1,
                    beta2,
                    config.eps,
                    wd,
                    t,
                    grad_scale,
                );
            }
            (Student::Masked { layer, .. }, StudentGrads::Masked(bundle)) => {
                let params = layer.params_mut();
                adam_w.update(
                    params.w,
                    bundle.d_w.as_slice(),
                    lr,
                    beta1,
                    beta2,
                    config.eps,
                    wd,
                    t,
                    grad_scale,
                );
                adam_wo.update(
                    params.w_o.expect("student has W_o"),
                    bundle.d_w_o.as_ref().expect("bundle has W_o").as_slice(),
                    lr,
                    beta1,
                    beta2,
                    config.eps,
                    wd,
                    t,
                    grad_scale,
                );
                if masks_trainable {
                    // Straight-through logit updates, exempt from decay.
                    adam_logits.as_mut().unwrap().update(
                        params.logits,
                        bundle.d_logits.as_slice(),
                        lr * config.mask_lr_mult,
                        beta1,
                        beta2,
                        config.eps,
                        0.0,
                        t,
                        grad_scale,
                    );
                }
                if let (Some(w_r), Some(d_wr), Some(state)) =
                    (params.w_r, bundle.d_w_r.as_ref(), adam_wr.as_mut())
                {
                    state.update(
                        w_r,
                        d_wr.as_slice(),
                        lr,
                        beta1,
                        beta2,
                        config.eps,
                        wd,
                        t,
                        grad_scale,
                    );
                }
            }
            _ => unreachable!("student and grads variants always match"),
        }
    }

    // Final recorded point. On divergence the non-finite batch loss is kept
    // as the terminal value; otherwise the fixed evaluation set decides.
    let final_loss = if diverged {
        last_loss
    } else {
        eval_loss(&student, &task, EVAL_LIMIT)
    };
    recorded_steps.push(if diverged { completed_steps } else { config.steps });
    loss_curve.push(final_loss);
    mask_stats_curve.push(match &student {
        Student::Masked { layer, .. } => layer.gate_ratios(),
        Student::Glu { .. } => Vec::new(),
    });

    Ok(TrainReport {
        recorded_steps,
        loss_curve,
        final_loss,
        mask_stats_curve,
        diverged,
        loss_spikes,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
