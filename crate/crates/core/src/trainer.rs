//! Optimizers, the step learning-rate schedule, PK batch sampling and the
//! training loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, AugConfig, ImageSet};
use crate::tensor::BnStats;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::losses::{self, LossConfig};
use crate::model::{EpanModel, Mode, ModelState};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    SgdMomentum,
    Adam,
    RmsProp,
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimKind::SgdMomentum),
            "adam" => Ok(OptimKind::Adam),
            "rmsprop" => Ok(OptimKind::RmsProp),
            other => Err(Error::config(
                "optim.kind",
                format!("unknown optimizer `{other}` (sgd_momentum, adam, rmsprop)"),
            )),
        }
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::SgdMomentum => "sgd_momentum",
            OptimKind::Adam => "adam",
            OptimKind::RmsProp => "rmsprop",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    /// Denominator guard for adam and rmsprop.
    pub eps: f64,
    pub rms_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub seed: u64,
    /// Learning-rate multiplier for the grid network's parameters.
    pub grid_lr_mult: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::for_kind(OptimKind::Adam)
    }
}

impl OptimConfig {
    pub fn for_kind(kind: OptimKind) -> Self {
        OptimConfig {
            kind,
            learning_rate: Self::default_lr(kind),
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            rms_decay: 0.99,
            step_size: 40,
            gamma: 0.1,
            weight_decay: 5e-4,
            epochs: 60,
            p: 4,
            k: 4,
            seed: 0,
            grid_lr_mult: 1.0,
        }
    }

    pub fn default_lr(kind: OptimKind) -> f64 {
        match kind {
            OptimKind::SgdMomentum => 0.05,
            OptimKind::Adam | OptimKind::RmsProp => 3.5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(self.learning_rate > 0.0, "optim.learning_rate", "must be > 0")?;
        check((0.0..1.0).contains(&self.momentum), "optim.momentum", "must lie in [0, 1)")?;
        check(
            (0.0..1.0).contains(&self.betas.0) && (0.0..1.0).contains(&self.betas.1),
            "optim.beta1",
            "betas must lie in [0, 1)",
        )?;
        check(self.eps > 0.0, "optim.eps", "must be > 0")?;
        check((0.0..1.0).contains(&self.rms_decay), "optim.rms_decay", "must lie in [0, 1)")?;
        check(self.step_size > 0, "optim.step_size", "must be positive")?;
        check(self.gamma > 0.0 && self.gamma <= 1.0, "optim.gamma", "must lie in (0, 1]")?;
        check(self.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0")?;
        check(self.p >= 2, "optim.p", "need at least 2 identities per batch")?;
        check(self.k >= 1, "optim.k", "must be positive")?;
        check(self.grid_lr_mult >= 0.0, "optim.grid_lr_mult", "must be >= 0")
    }
}

/// Step schedule: `learning_rate * gamma^floor(epoch / step_size)`.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> f64 {
    cfg.learning_rate * cfg.gamma.powi((epoch / cfg.step_size) as i32)
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer over named parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    slots: BTreeMap<String, Slot>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            slots: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates one parameter in place. `t` is the 1-based step count.
    fn update(&mut self, name: &str, w: &mut [f64], g: &[f64], lr: f64, t: u64) {
        let c = &self.cfg;
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![0.0; w.len()],
            v: vec![0.0; w.len()],
        });
        match c.kind {
            OptimKind::SgdMomentum => {
                for ((w, &g), m) in w.iter_mut().zip(g).zip(&mut slot.m) {
                    let g = g + c.weight_decay * *w;
                    *m = c.momentum * *m + g;
                    *w -= lr * *m;
                }
            }
            OptimKind::Adam => {
                let (b1, b2) = c.betas;
                let bc1 = 1.0 - b1.powi(t as i32);
                let bc2 = 1.0 - b2.powi(t as i32);
                for (((w, &g), m), v) in w.iter_mut().zip(g).zip(&mut slot.m).zip(&mut slot.v) {
                    let g = g + c.weight_decay * *w;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                }
            }
            OptimKind::RmsProp => {
                let rho = c.rms_decay;
                for ((w, &g), v) in w.iter_mut().zip(g).zip(&mut slot.v) {
                    let g = g + c.weight_decay * *w;
                    *v = rho * *v + (1.0 - rho) * g * g;
                    *w -= lr * g / (v.sqrt() + c.eps);
                }
            }
        }
    }

    /// One update of every parameter in `state` that has a gradient.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    index: i,
                    message: format!("non-finite gradient in parameter {name}"),
                });
            }
        }
        self.t += 1;
        let t = self.t;
        for (name, g) in grads {
            let Some(p) = state.params.get_mut(name) else {
                return Err(Error::Usage(format!("gradient for unknown parameter {name}")));
            };
            if p.numel() != g.len() {
                return Err(Error::dim(format!("gradient length mismatch for {name}")));
            }
            let plr = if name.starts_with("grid.") {
                lr * self.cfg.grid_lr_mult
            } else {
                lr
            };
            self.update(name, p.data_mut(), g, plr, t);
        }
        Ok(())
    }
}

/// P identities × K instances per batch. Each epoch shuffles every
/// identity's images into groups of K (identities with fewer than K images
/// are topped up by resampling) and deals groups from P randomly chosen
/// identities into each batch until fewer than P identities have groups left.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_class: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(labels: &[usize], num_classes: usize, p: usize, k: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let present = by_class.iter().filter(|c| !c.is_empty()).count();
        if present < p || labels.len() < p * k {
            return Err(Error::config(
                "optim.p",
                format!(
                    "dataset has {} samples over {present} identities; a {p}x{k} batch needs at least {p} identities and {} samples",
                    labels.len(),
                    p * k
                ),
            ));
        }
        by_class.retain(|c| !c.is_empty());
        Ok(PkSampler { by_class, p, k })
    }

    /// Sample indices for one epoch, grouped into batches.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<Vec<usize>>> = self
            .by_class
            .iter()
            .map(|members| {
                let mut idx = members.clone();
                while idx.len() < self.k {
                    idx.push(members[rng.random_range(0..members.len())]);
                }
                idx.shuffle(rng);
                idx.chunks_exact(self.k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut avail: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
            if avail.len() < self.p {
                break;
            }
            avail.shuffle(rng);
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &c in &avail[..self.p] {
                batch.extend(groups[c].pop().expect("available class has a group"));
            }
            batches.push(batch);
        }
        batches
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Record elapsed time in the log; off keeps the log bitwise reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            exec: Exec::Parallel,
            record_wall_time: false,
        }
    }
}

/// Called after every epoch with the epoch index and the current model.
pub type EpochHook<'a> = dyn FnMut(usize, &EpanModel) -> Result<()> + 'a;

fn batch_seed(seed: u64, epoch: usize, iter: usize, slot: usize) -> u64 {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, iter as u64, slot as u64] {
        s = s.wrapping_mul(0x100_0000_01b3).wrapping_add(v.wrapping_add(1));
    }
    s
}

/// One forward/backward pass over a batch; returns the loss, the parameter
/// gradients and the batch-norm statistics.
pub fn batch_gradients(
    model: &EpanModel,
    images: &[&Tensor],
    targets: &[usize],
    loss_cfg: &LossConfig,
    exec: Exec,
) -> Result<(f64, BTreeMap<String, Vec<f64>>, Vec<(String, BnStats)>)> {
    let mut tape = Tape::with_exec(exec);
    let vars = model.register(&mut tape, true);
    let x = tape.constant(Tensor::stack(images)?);
    let mut ctx = model.ctx(&mut tape, &vars, Mode::Train);
    let out = model.forward(&mut ctx, x)?;
    let stats = std::mem::take(&mut ctx.stats);
    let terms = losses::total_loss(
        &mut tape,
        out.base.logits,
        out.align_logits,
        out.fused,
        targets,
        loss_cfg,
    )?;
    let loss = tape.value(terms.total).item();
    if !loss.is_finite() {
        return Err(Error::Numeric {
            index: 0,
            message: "non-finite training loss".into(),
        });
    }
    tape.backward(terms.total)?;
    let grads = vars
        .iter()
        .map(|(name, &v)| {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
            (name.clone(), g)
        })
        .collect();
    Ok((loss, grads, stats))
}

/// Trains `model` in place and returns one log entry per epoch.
pub fn train(
    model: &mut EpanModel,
    data: &ImageSet,
    loss_cfg: &LossConfig,
    optim_cfg: &OptimConfig,
    aug_cfg: &AugConfig,
    opts: &TrainOptions,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<Vec<EpochLog>> {
    loss_cfg.validate()?;
    optim_cfg.validate()?;
    if optim_cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let (labels, classes) = data.class_labels();
    if classes != model.config.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!("model has {} classes, training set has {classes}", model.config.num_classes),
        ));
    }
    let sampler = PkSampler::new(&labels, classes, optim_cfg.p, optim_cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(optim_cfg.seed);
    let mut opt = Optimizer::new(optim_cfg.clone());
    let start = Instant::now();
    let mut log = Vec::with_capacity(optim_cfg.epochs);
    for epoch in 0..optim_cfg.epochs {
        let lr = lr_at(epoch, optim_cfg);
        let batches = sampler.epoch(&mut rng);
        let mut loss_sum = 0.0;
        for (iter, batch) in batches.iter().enumerate() {
            let images: Vec<Tensor> = if aug_cfg.is_identity() {
                batch.iter().map(|&i| data.images[i].clone()).collect()
            } else {
                exec::map_range(opts.exec, batch.len(), |slot| {
                    let mut r = ChaCha8Rng::seed_from_u64(batch_seed(optim_cfg.seed, epoch, iter, slot));
                    augment::augment(&data.images[batch[slot]], aug_cfg, &mut r)
                })
            };
            let refs: Vec<&Tensor> = images.iter().collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, grads, stats) = batch_gradients(model, &refs, &targets, loss_cfg, opts.exec)?;
            opt.step(&mut model.state, &grads, lr)?;
            model.apply_running_stats(&stats);
            loss_sum += loss;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches.len().max(1) as f64,
            lr,
            wall_seconds: if opts.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log.push(entry);
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(epoch, model)?;
        }
    }
    Ok(log)
}

pub const LOG_HEADER: &str = "epoch,mean_loss,lr,wall_seconds";

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.lr, e.wall_seconds));
    }
    s
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log_csv(log).as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn scalar_state(w: f64) -> ModelState {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::new(&[1], vec![w]).unwrap());
        ModelState {
            params,
            buffers: BTreeMap::new(),
        }
    }

    fn grad(g: f64) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("w".to_string(), vec![g])])
    }

    fn w(state: &ModelState) -> f64 {
        state.params["w"].data()[0]
    }

    fn cfg(kind: OptimKind, lr: f64) -> OptimConfig {
        OptimConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..OptimConfig::for_kind(kind)
        }
    }

    #[test]
    fn step_schedule() {
        let c = OptimConfig {
            learning_rate: 0.1,
            ..OptimConfig::default()
        };
        assert_eq!(lr_at(0, &c), 0.1);
        assert!((lr_at(40, &c) - 0.01).abs() < 1e-15);
        assert_eq!(lr_at(39, &c), 0.1);
    }

    #[test]
    fn plain_sgd_step() {
        let c = OptimConfig {
            momentum: 0.0,
            ..cfg(OptimKind::SgdMomentum, 0.1)
        };
        let mut s = scalar_state(1.0);
        Optimizer::new(c).step(&mut s, &grad(2.0), 0.1).unwrap();
        assert!((w(&s) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for g in [1e-3, 1.0, 1e3] {
            let mut s = scalar_state(0.0);
            Optimizer::new(cfg(OptimKind::Adam, 0.01)).step(&mut s, &grad(g), 0.01).unwrap();
            assert!((w(&s).abs() - 0.01).abs() < 0.01 * 0.01, "g={g}: {}", w(&s));
        }
    }

    #[test]
    fn quadratic_converges_for_every_optimizer() {
        for (kind, lr, decay) in [
            (OptimKind::SgdMomentum, 0.05, 1.0),
            (OptimKind::Adam, 0.3, 0.97),
            (OptimKind::RmsProp, 0.1, 0.98),
        ] {
            let c = cfg(kind, lr);
            let mut opt = Optimizer::new(c.clone());
            let mut s = scalar_state(0.0);
            for step in 0..200 {
                let lr = lr * f64::powi(decay, step);
                let g = 2.0 * (w(&s) - 3.0);
                opt.step(&mut s, &grad(g), lr).unwrap();
            }
            assert!((w(&s) - 3.0).abs() < 1e-2, "{kind}: {}", w(&s));
        }
    }

    #[test]
    fn adam_without_momentum_matches_rmsprop_without_decay() {
        let a = OptimConfig {
            betas: (0.0, 0.0),
            ..cfg(OptimKind::Adam, 0.01)
        };
        let r = OptimConfig {
            rms_decay: 0.0,
            ..cfg(OptimKind::RmsProp, 0.01)
        };
        let (mut oa, mut or) = (Optimizer::new(a), Optimizer::new(r));
        let (mut sa, mut sr) = (scalar_state(0.5), scalar_state(0.5));
        for g in [0.3, -2.0, 7.5, 1e-4, -0.02] {
            oa.step(&mut sa, &grad(g), 0.01).unwrap();
            or.step(&mut sr, &grad(g), 0.01).unwrap();
            assert!((w(&sa) - w(&sr)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for kind in [OptimKind::SgdMomentum, OptimKind::Adam, OptimKind::RmsProp] {
            let mut s = scalar_state(1.25);
            let mut o = Optimizer::new(cfg(kind, 0.1));
            for _ in 0..3 {
                o.step(&mut s, &grad(0.0), 0.1).unwrap();
            }
            assert_eq!(w(&s), 1.25);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = scalar_state(1.0);
        let err = Optimizer::new(cfg(OptimKind::Adam, 0.1))
            .step(&mut s, &grad(f64::NAN), 0.1)
            .unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(w(&s), 1.0);
    }

    #[test]
    fn pk_batches_have_p_ids_and_k_each() {
        let labels: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let s = PkSampler::new(&labels, 6, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let epoch = s.epoch(&mut rng);
        assert_eq!(epoch.len(), 2);
        let mut seen: Vec<usize> = epoch.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 24);
        for b in &epoch {
            assert_eq!(b.len(), 12);
            for chunk in b.chunks(4) {
                assert!(chunk.iter().all(|&i| labels[i] == labels[chunk[0]]));
            }
        }
        assert!(PkSampler::new(&labels, 6, 7, 2).is_err());
    }

    fn toy() -> (EpanModel, ImageSet) {
        let cfg = ModelConfig {
            input_h: 16,
            input_w: 16,
            stage_channels: [2, 2, 4, 4],
            num_classes: 3,
            embed_dim: 4,
            grid_channels: 2,
            ..ModelConfig::default()
        };
        let mut set = ImageSet::default();
        for i in 0..12 {
            let pid = (i % 3) as i64;
            set.push(
                Tensor::from_fn(&[3, 16, 16], |j| (((j + i) * (pid as usize + 3)) % 11) as f64 / 11.0),
                pid,
                1,
            );
        }
        (EpanModel::new(cfg, 5).unwrap(), set)
    }

    #[test]
    fn zero_epochs_leave_model_untouched() {
        let (mut m, set) = toy();
        let before = m.clone();
        let c = OptimConfig {
            epochs: 0,
            p: 2,
            k: 2,
            ..OptimConfig::default()
        };
        let log = train(&mut m, &set, &LossConfig::default(), &c, &AugConfig::default(), &TrainOptions::default(), None).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic_and_logs_schedule() {
        let c = OptimConfig {
            epochs: 3,
            p: 3,
            k: 2,
            step_size: 2,
            ..OptimConfig::default()
        };
        let run = |exec| {
            let (mut m, set) = toy();
            let opts = TrainOptions {
                exec,
                ..TrainOptions::default()
            };
            let log = train(&mut m, &set, &LossConfig::default(), &c, &AugConfig::default(), &opts, None).unwrap();
            (log_csv(&log), m)
        };
        let (a, ma) = run(Exec::Parallel);
        let (b, mb) = run(Exec::Sequential);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), 4);
        for (e, line) in lines[1..].iter().enumerate() {
            let lr: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert_eq!(lr, lr_at(e, &c));
        }
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let (mut m, mut set) = toy();
        set.push(set.images[0].clone(), 9, 1);
        let c = OptimConfig {
            epochs: 1,
            p: 2,
            k: 2,
            ..OptimConfig::default()
        };
        let err = train(&mut m, &set, &LossConfig::default(), &c, &AugConfig::disabled(), &TrainOptions::default(), None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
