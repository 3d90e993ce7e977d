//! Alternating adversarial training and evaluation.
//!
//! Each batch of whole patients runs the generator once in training mode.
//! The discriminator then takes `d_steps_per_g` updates on real
//! (image, one-hot labels) against fake (image, detached generator output)
//! pairs, after which the generator takes one update on the combined
//! objective with the discriminator's parameters held fixed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentationConfig, Dataset, PatientRecord};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    discriminator_loss, generator_adversarial, one_hot, total_generator_loss_var, weighted_cce_slices, AdversarialForm,
    LossBreakdown, LossCoeffs,
};
use crate::metrics::{build_report, MetricsReport, PatientPrediction, RegionSpec, RegionSummary};
use crate::models::{one_hot_slice, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weighting::{compute_label_stats, compute_stats, compute_weights, ClassWeights};

pub const MAX_EPOCHS: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Patients per step.
    pub batch_size: usize,
    pub d_steps_per_g: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    pub weighting_enabled: bool,
    pub coeffs: LossCoeffs,
    /// Validation interval in epochs; 0 evaluates only after the last epoch.
    pub eval_every: usize,
    pub lr_decay: Option<StepDecay>,
    pub adversarial_form: AdversarialForm,
    pub augmentation: AugmentationConfig,
    /// Fingerprint both parameter stores around every update and fail if
    /// the other network changed.
    pub check_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: MAX_EPOCHS,
            batch_size: 1,
            d_steps_per_g: 1,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            weighting_enabled: true,
            coeffs: LossCoeffs::default(),
            eval_every: 1,
            lr_decay: None,
            adversarial_form: AdversarialForm::default(),
            augmentation: AugmentationConfig::default(),
            check_isolation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return Err(Error::Config(format!(
                "max_epochs {} not in [1, {}]",
                self.max_epochs, MAX_EPOCHS
            )));
        }
        if self.batch_size == 0 || self.d_steps_per_g == 0 {
            return Err(Error::Config("batch_size and d_steps_per_g must be >= 1".into()));
        }
        let c = self.coeffs;
        if [c.adv, c.seg, c.cls].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss coefficients must be finite and >= 0".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::Config(
                    "lr_decay needs every_epochs >= 1 and factor in (0, 1]".into(),
                ));
            }
        }
        self.optimizer(0).validate()?;
        self.augmentation.validate()
    }

    /// Optimiser settings in effect during `epoch`.
    pub fn optimizer(&self, epoch: usize) -> RmsPropConfig {
        let mut lr = self.learning_rate;
        if let Some(d) = self.lr_decay {
            lr *= num_traits::Float::powi(d.factor, (epoch / d.every_epochs) as i32);
        }
        RmsPropConfig {
            learning_rate: lr,
            rho: self.rho,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_foreground_dice: f64,
    pub accuracy: f64,
    pub regions: Vec<RegionSummary>,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub seed: u64,
    pub config_hash: u64,
    /// Filled in by callers that have a clock.
    pub wall_clock_secs: Option<f64>,
}

/// Everything needed to resume or checkpoint a run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub g_opt: RmsProp<T>,
    pub d_opt: RmsProp<T>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator updates.
    pub step: usize,
}

impl<T: Real> TrainState<T> {
    pub fn new(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: &TrainConfig) -> Result<Self> {
        let gen = Generator::new(gen_cfg, cfg.seed)?;
        let disc = Discriminator::new(disc_cfg, cfg.seed)?;
        let g_opt = RmsProp::new(cfg.optimizer(0), &gen.params)?;
        let d_opt = RmsProp::new(cfg.optimizer(0), &disc.params)?;
        Ok(Self {
            gen,
            disc,
            g_opt,
            d_opt,
            epoch: 0,
            step: 0,
        })
    }
}

/// Hooks for logging and checkpointing; every method defaults to a no-op.
pub trait TrainObserver<T> {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _record: &EvalRecord, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }

    fn on_finish(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

fn tag(e: Error, step: usize, term: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {}, {}: {}", step, term, m)),
        other => other,
    }
}

fn non_finite(step: usize, term: &str, v: f64) -> Error {
    Error::NonFinite(format!("step {}, {}: value {}", step, term, v))
}

fn fnv(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Class weights for segmentation and disease terms, uniform when
/// weighting is off.
pub fn loss_weights(train: &Dataset, enabled: bool) -> Result<(ClassWeights, ClassWeights)> {
    if !enabled {
        return Ok((
            ClassWeights::uniform(train.num_seg_classes),
            ClassWeights::uniform(train.num_diseases),
        ));
    }
    let seg = compute_weights(&compute_stats(train.label_volumes(), train.num_seg_classes)?);
    let dis = compute_weights(&compute_label_stats(&train.diseases(), train.num_diseases)?);
    Ok((seg, dis))
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: TrainState<T>,
    pub seg_weights: Vec<T>,
    pub disease_weights: Vec<T>,
    pub regions: Vec<RegionSpec>,
    config_hash: u64,
}

struct PatientForward {
    xs: Vec<Var>,
    out: crate::models::GenOutput,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        gen_cfg: GeneratorConfig,
        disc_cfg: DiscriminatorConfig,
        config: TrainConfig,
        train: &Dataset,
        regions: Vec<RegionSpec>,
    ) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(gen_cfg, disc_cfg, &config)?;
        Self::resume(state, config, train, regions)
    }

    pub fn resume(
        state: TrainState<T>,
        config: TrainConfig,
        train: &Dataset,
        regions: Vec<RegionSpec>,
    ) -> Result<Self> {
        config.validate()?;
        train.validate()?;
        let gc = &state.gen.config;
        let p0 = &train.patients[0];
        if gc.in_channels != p0.modalities
            || gc.height != p0.height
            || gc.width != p0.width
            || gc.num_seg_classes != train.num_seg_classes
            || gc.num_diseases != train.num_diseases
        {
            return Err(Error::Config(format!(
                "generator expects {} modalities, {}x{}, {} classes, {} diseases; dataset has {}, {}x{}, {}, {}",
                gc.in_channels,
                gc.height,
                gc.width,
                gc.num_seg_classes,
                gc.num_diseases,
                p0.modalities,
                p0.height,
                p0.width,
                train.num_seg_classes,
                train.num_diseases
            )));
        }
        let dc = &state.disc.config;
        if (dc.in_channels, dc.num_seg_classes, dc.height, dc.width)
            != (gc.in_channels, gc.num_seg_classes, gc.height, gc.width)
        {
            return Err(Error::Config(
                "discriminator config does not match the generator".into(),
            ));
        }
        let (seg, dis) = loss_weights(train, config.weighting_enabled)?;
        let config_hash = fnv(format!("{:?}|{:?}|{:?}", gc, dc, config).as_bytes());
        Ok(Self {
            seg_weights: seg.w.iter().map(|&w| T::of(w)).collect(),
            disease_weights: dis.w.iter().map(|&w| T::of(w)).collect(),
            config,
            state,
            regions,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    fn check(&self, before: u64, after: u64, which: &str, step: usize) -> Result<()> {
        if before != after {
            return Err(Error::InvalidArgument {
                op: "update_isolation",
                detail: format!("{} parameters changed at step {}", which, step),
            });
        }
        Ok(())
    }

    /// One discriminator phase and one generator update on a batch.
    pub fn train_step(&mut self, batch: &[PatientRecord], rng: &mut Rng) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Empty("train_step batch"));
        }
        let step = self.state.step;
        let k = self.state.gen.config.num_seg_classes;
        let inv = T::one() / T::of(batch.len() as f64);

        let mut g = Graph::new();
        let gb = self.state.gen.params.bind(&mut g);
        let mut fwd = Vec::with_capacity(batch.len());
        for p in batch {
            let xs: Vec<Var> = (0..p.slices).map(|s| g.constant(p.slice_input(s))).collect();
            let out = self.state.gen.forward(&mut g, &gb, &xs, Mode::Train, rng)?;
            fwd.push(PatientForward { xs, out });
        }
        let real: Vec<Vec<Tensor<T>>> = batch
            .iter()
            .map(|p| {
                (0..p.slices)
                    .map(|s| one_hot_slice(p.slice_labels(s), k, p.height, p.width))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;

        let mut adv_d = 0.0;
        for _ in 0..self.config.d_steps_per_g {
            let g_print = self.config.check_isolation.then(|| self.state.gen.params.fingerprint());
            let mut dg = Graph::new();
            let db = self.state.disc.params.bind(&mut dg);
            let mut per = Vec::with_capacity(batch.len());
            for (f, r) in fwd.iter().zip(&real) {
                let xs: Vec<Var> = f.xs.iter().map(|&x| dg.constant(g.value(x).clone())).collect();
                let ys: Vec<Var> = r.iter().map(|t| dg.constant(t.clone())).collect();
                let fake: Vec<Var> = f
                    .out
                    .seg_probs
                    .iter()
                    .map(|&v| dg.constant(g.value(v).clone()))
                    .collect();
                let sr = self.state.disc.forward(&mut dg, &db, &xs, &ys)?;
                let sf = self.state.disc.forward(&mut dg, &db, &xs, &fake)?;
                per.push(discriminator_loss(&mut dg, &sr, &sf)?);
            }
            let sum = dg.add_n(&per)?;
            let loss = dg.scale(sum, inv);
            adv_d = dg.value(loss).item().as_f64();
            if !adv_d.is_finite() {
                return Err(non_finite(step, "adv_d", adv_d));
            }
            dg.backward(loss).map_err(|e| tag(e, step, "adv_d"))?;
            self.state.disc.params.zero_grad();
            self.state.disc.params.accumulate_grads(&dg, &db, T::one());
            self.state
                .d_opt
                .step(&mut self.state.disc.params)
                .map_err(|e| tag(e, step, "adv_d"))?;
            if let Some(before) = g_print {
                self.check(before, self.state.gen.params.fingerprint(), "generator", step)?;
            }
        }

        let d_print = self
            .config
            .check_isolation
            .then(|| self.state.disc.params.fingerprint());
        let db = self.state.disc.params.bind_frozen(&mut g);
        let (mut advs, mut segs, mut clss) = (Vec::new(), Vec::new(), Vec::new());
        for (p, f) in batch.iter().zip(&fwd) {
            let scores = self.state.disc.forward(&mut g, &db, &f.xs, &f.out.seg_probs)?;
            advs.push(generator_adversarial(&mut g, &scores, self.config.adversarial_form)?);
            let labels: Vec<&[u8]> = (0..p.slices).map(|s| p.slice_labels(s)).collect();
            segs.push(weighted_cce_slices(
                &mut g,
                &f.out.seg_probs,
                &labels,
                &self.seg_weights,
            )?);
            let target = one_hot::<T>(p.disease, self.disease_weights.len());
            clss.push(g.weighted_l1(f.out.disease_probs, &target, &self.disease_weights)?);
        }
        let mut mean = |xs: &[Var]| -> Result<Var> {
            let s = g.add_n(xs)?;
            Ok(g.scale(s, inv))
        };
        let (adv, seg, cls) = (mean(&advs)?, mean(&segs)?, mean(&clss)?);
        let total = total_generator_loss_var(&mut g, adv, seg, cls, &self.config.coeffs)?;
        let losses = LossBreakdown {
            adv_d,
            adv_g: g.value(adv).item().as_f64(),
            seg_ce: g.value(seg).item().as_f64(),
            cls_l1: g.value(cls).item().as_f64(),
            total: g.value(total).item().as_f64(),
        };
        if let Some(term) = losses.first_non_finite() {
            let v = match term {
                "adv_g" => losses.adv_g,
                "seg_ce" => losses.seg_ce,
                "cls_l1" => losses.cls_l1,
                _ => losses.total,
            };
            return Err(non_finite(step, term, v));
        }
        g.backward(total).map_err(|e| tag(e, step, "total"))?;
        self.state.gen.params.zero_grad();
        self.state.gen.params.accumulate_grads(&g, &gb, T::one());
        self.state
            .g_opt
            .step(&mut self.state.gen.params)
            .map_err(|e| tag(e, step, "total"))?;
        for f in &fwd {
            let feats = g.value(f.out.head_features).data().to_vec();
            self.state
                .gen
                .update_head_stats(&feats)
                .map_err(|e| tag(e, step, "cls_l1"))?;
        }
        if let Some(before) = d_print {
            self.check(before, self.state.disc.params.fingerprint(), "discriminator", step)?;
        }
        self.state.step += 1;
        Ok(losses)
    }

    /// Trains from the current state up to `max_epochs`.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, obs: &mut dyn TrainObserver<T>) -> Result<TrainLog> {
        train.validate()?;
        let mut log = TrainLog {
            seed: self.config.seed,
            config_hash: self.config_hash,
            ..TrainLog::default()
        };
        let mut best = f64::NEG_INFINITY;
        let n = train.patients.len();
        while self.state.epoch < self.config.max_epochs {
            let epoch = self.state.epoch;
            let opt = self.config.optimizer(epoch);
            self.state.g_opt.config = opt;
            self.state.d_opt.config = opt;
            let mut rng = Rng::derive(self.config.seed, 0x1000 + epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<PatientRecord> = chunk
                    .iter()
                    .map(|&i| {
                        let p = &train.patients[i];
                        if self.config.augmentation.enabled {
                            augment(p, &self.config.augmentation, &mut rng)
                        } else {
                            p.clone()
                        }
                    })
                    .collect();
                let losses = self.train_step(&batch, &mut rng)?;
                let record = StepRecord {
                    step: self.state.step,
                    epoch,
                    losses,
                };
                obs.on_step(&record)?;
                log.steps.push(record);
            }
            self.state.epoch += 1;
            let last = self.state.epoch == self.config.max_epochs;
            let due = self.config.eval_every > 0 && self.state.epoch % self.config.eval_every == 0;
            if let Some(val) = val {
                if due || last {
                    let report = evaluate(&self.state.gen, val, &self.regions)?;
                    let is_best = report.mean_foreground_dice > best;
                    if is_best {
                        best = report.mean_foreground_dice;
                    }
                    let record = EvalRecord {
                        epoch: self.state.epoch,
                        step: self.state.step,
                        mean_foreground_dice: report.mean_foreground_dice,
                        accuracy: report.accuracy,
                        regions: report.regions,
                        best: is_best,
                    };
                    obs.on_eval(&record, &self.state)?;
                    log.evals.push(record);
                }
            }
        }
        obs.on_finish(&self.state)?;
        Ok(log)
    }
}

/// Builds and trains a fresh pair of networks.
pub fn train<T: Real>(
    train_set: &Dataset,
    val: Option<&Dataset>,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    config: TrainConfig,
    regions: Vec<RegionSpec>,
) -> Result<(Generator<T>, Discriminator<T>, TrainLog)> {
    let mut t = Trainer::new(gen_cfg, disc_cfg, config, train_set, regions)?;
    let log = t.run(train_set, val, &mut NoObserver)?;
    Ok((t.state.gen, t.state.disc, log))
}

/// Per-pixel argmax over the class axis of a `[K, H, W]` map; ties go to the
/// lowest class index.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<u8> {
    let k = probs.shape()[0];
    let plane = probs.len() / k;
    let d = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_patient<T: Real>(gen: &Generator<T>, p: &PatientRecord) -> Result<PatientPrediction> {
    let slices: Vec<Tensor<T>> = (0..p.slices).map(|s| p.slice_input(s)).collect();
    let (seg, dis) = gen.predict(&slices)?;
    Ok(PatientPrediction {
        id: p.id.clone(),
        dims: [p.slices, p.height, p.width],
        pred_labels: seg.iter().flat_map(argmax_labels).collect(),
        gt_labels: p.labels.clone(),
        disease_pred: argmax(dis.data()),
        disease_true: p.disease,
    })
}

/// Inference-mode predictions for every patient of a split.
pub fn predict_split<T: Real>(gen: &Generator<T>, data: &Dataset) -> Result<Vec<PatientPrediction>> {
    if data.patients.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    data.patients.iter().map(|p| predict_patient(gen, p)).collect()
}

pub fn evaluate<T: Real>(gen: &Generator<T>, data: &Dataset, regions: &[RegionSpec]) -> Result<MetricsReport> {
    build_report(&predict_split(gen, data)?, regions, data.num_seg_classes)
}

/// Report for a stand-in generator that returns the reference labels and
/// disease.
pub fn evaluate_oracle(data: &Dataset, regions: &[RegionSpec]) -> Result<MetricsReport> {
    if data.patients.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let preds: Vec<PatientPrediction> = data
        .patients
        .iter()
        .map(|p| PatientPrediction {
            id: p.id.clone(),
            dims: [p.slices, p.height, p.width],
            pred_labels: p.labels.clone(),
            gt_labels: p.labels.clone(),
            disease_pred: p.disease,
            disease_true: p.disease,
        })
        .collect();
    build_report(&preds, regions, data.num_seg_classes)
}

/// Trains only the discriminator against a generator that emits the one-hot
/// reference labels, returning the discriminator loss of every step.
pub fn oracle_discriminator_run<T: Real>(
    disc_cfg: DiscriminatorConfig,
    config: &TrainConfig,
    data: &Dataset,
    steps: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    data.validate()?;
    let mut disc = Discriminator::<T>::new(disc_cfg, config.seed)?;
    let mut opt = RmsProp::new(config.optimizer(0), &disc.params)?;
    let k = data.num_seg_classes;
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let p = &data.patients[step % data.patients.len()];
        let mut g = Graph::new();
        let b = disc.params.bind(&mut g);
        let xs: Vec<Var> = (0..p.slices).map(|s| g.constant(p.slice_input(s))).collect();
        let mut real = Vec::with_capacity(p.slices);
        let mut fake = Vec::with_capacity(p.slices);
        for s in 0..p.slices {
            let t = one_hot_slice(p.slice_labels(s), k, p.height, p.width)?;
            real.push(g.constant(t.clone()));
            fake.push(g.constant(t));
        }
        let sr = disc.forward(&mut g, &b, &xs, &real)?;
        let sf = disc.forward(&mut g, &b, &xs, &fake)?;
        let loss = discriminator_loss(&mut g, &sr, &sf)?;
        let v = g.value(loss).item().as_f64();
        if !v.is_finite() {
            return Err(non_finite(step, "adv_d", v));
        }
        g.backward(loss)?;
        disc.params.zero_grad();
        disc.params.accumulate_grads(&g, &b, T::one());
        opt.step(&mut disc.params)?;
        out.push(v);
    }
    Ok(out)
}

/// Human-readable one-line summary of a report.
pub fn summary_line(r: &MetricsReport) -> String {
    let mut s = format!("acc={:.4} mean_fg_dice={:.4}", r.accuracy, r.mean_foreground_dice);
    for reg in &r.regions {
        s.push_str(&format!(" {}:dice={:.4}", reg.region, reg.dice));
        if let Some(v) = reg.sensitivity {
            s.push_str(&format!(",sen={:.4}", v));
        }
    }
    s
}
