//! The iterative diffusion optimization loop: simulate under the frozen control, evaluate
//! a loss on the detached batch, take an Adam step.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::{control_l2_error, EvalMeasure};
use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::losses::{compute, GradEstimate, LossInput, LossKind, LossOptions};
use crate::problem::{GroundTruth, SocProblem};
use crate::reparam::ReparamFamily;
use crate::simulate::{effective_sample_size, simulate, TimeGrid};

/// Mixes a base seed with a counter (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) {
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_reparam: f64,
    pub lr_y0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Evaluate every this many iterations (and after the last one).
    pub eval_every: usize,
    pub eval_batch: usize,
    pub eval_seed: u64,
    pub eval_measure: EvalMeasure,
    /// Weight of a new evaluation in the moving average.
    pub ema_weight: f64,
    pub seed: u64,
    pub options: LossOptions,
    /// Record elapsed time in the log; off keeps logs byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::AdjointMatching,
            iterations: 1000,
            batch_size: 64,
            steps: 50,
            lr: 1e-3,
            lr_reparam: 1e-2,
            lr_y0: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 10,
            eval_batch: 512,
            eval_seed: 0xe7a1,
            eval_measure: EvalMeasure::Learned,
            ema_weight: 0.02,
            seed: 0,
            options: LossOptions::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lr_reparam, self.lr_y0, self.eps, self.ema_weight];
        if self.batch_size == 0 || self.steps == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch size, steps, eval cadence and eval batch must be positive".into()));
        }
        if positive.iter().any(|v| !(*v > 0.0)) || self.ema_weight > 1.0 {
            return Err(Error::Config("learning rates, eps and EMA weight must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub l2_error: f64,
    pub l2_error_ema: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub ess: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Bias-corrected exponential moving average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    pub raw: f64,
    pub count: u64,
}

impl Ema {
    pub fn update(&mut self, x: f64, weight: f64) -> f64 {
        self.raw = (1.0 - weight) * self.raw + weight * x;
        self.count += 1;
        self.raw / (1.0 - (1.0 - weight).powi(self.count as i32))
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub theta: Vec<f64>,
    pub reparam: Vec<f64>,
    pub adam_theta: AdamState,
    pub adam_reparam: AdamState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub loss: LossKind,
    pub iteration: usize,
    pub y0: f64,
    pub adam_y0: AdamState,
    pub ema: Ema,
    pub log: TrainLog,
    pub theta_len: usize,
    pub reparam_len: usize,
    pub adam_theta_t: u64,
    pub adam_reparam_t: u64,
}

const MAGIC: &[u8; 8] = b"SOCCKPT1";

impl Checkpoint {
    /// Magic, header length, JSON header, then little-endian `f64` arrays:
    /// θ, M parameters, and the Adam moments of both.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for arr in [
            &self.theta,
            &self.reparam,
            &self.adam_theta.m,
            &self.adam_theta.v,
            &self.adam_reparam.m,
            &self.adam_reparam.v,
        ] {
            for x in arr.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut read = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated parameter block".into()))?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let (nt, nr) = (header.theta_len, header.reparam_len);
        let theta = read(nt)?;
        let reparam = read(nr)?;
        let adam_theta = AdamState { m: read(nt)?, v: read(nt)?, t: header.adam_theta_t };
        let adam_reparam = AdamState { m: read(nr)?, v: read(nr)?, t: header.adam_reparam_t };
        Ok(Checkpoint { header, theta, reparam, adam_theta, adam_reparam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Training state for one (problem, loss, seed) run.
pub struct Trainer<'a> {
    pub problem: &'a SocProblem,
    pub gt: Option<&'a GroundTruth>,
    pub cfg: TrainConfig,
    pub ctrl: Box<dyn ControlFunction>,
    pub family: Option<ReparamFamily>,
    pub y0: f64,
    pub iteration: usize,
    pub log: TrainLog,
    grid: TimeGrid,
    adam_theta: AdamState,
    adam_reparam: AdamState,
    adam_y0: AdamState,
    ema: Ema,
    started: Instant,
}

/// Result of [`ido_train`].
pub struct TrainOutcome {
    pub log: TrainLog,
    /// State after the last successful iteration.
    pub checkpoint: Checkpoint,
    pub ctrl: Box<dyn ControlFunction>,
    pub family: Option<ReparamFamily>,
    /// Why training stopped early, if it did.
    pub halted: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        problem: &'a SocProblem,
        gt: Option<&'a GroundTruth>,
        ctrl: Box<dyn ControlFunction>,
        family: Option<ReparamFamily>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if ctrl.dim() != problem.dim {
            return Err(Error::Shape { what: "control dimension", expected: problem.dim, got: ctrl.dim() });
        }
        let family = if cfg.loss.needs_reparam() {
            Some(family.unwrap_or_else(|| ReparamFamily::identity(problem.dim, problem.horizon, false)))
        } else {
            None
        };
        let nr = family.as_ref().map_or(0, |f| f.num_params());
        Ok(Trainer {
            grid: TimeGrid::uniform(problem.horizon, cfg.steps),
            adam_theta: AdamState::new(ctrl.num_params()),
            adam_reparam: AdamState::new(nr),
            adam_y0: AdamState::new(1),
            problem,
            gt,
            cfg,
            ctrl,
            family,
            y0: 0.0,
            iteration: 0,
            log: TrainLog::default(),
            ema: Ema::default(),
            started: Instant::now(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Loss estimate on the batch of the current iteration.
    pub fn estimate(&self) -> Result<(GradEstimate, f64)> {
        let seed = derive_seed(self.cfg.seed, self.iteration as u64);
        let batch = simulate(self.problem, &self.ctrl.freeze(), &self.grid, self.cfg.batch_size, seed)?;
        let input = LossInput {
            problem: self.problem,
            batch: &batch,
            ctrl: self.ctrl.as_ref(),
            family: self.family.as_ref(),
            y0: (self.cfg.loss == LossKind::Moment).then_some(self.y0),
        };
        let est = compute(self.cfg.loss, &input, &self.cfg.options)?;
        let ess = match est.diagnostics.ess {
            Some(e) => e,
            None => {
                let log_w: Vec<f64> = batch.functionals(self.problem).iter().map(|f| f.log_weight()).collect();
                effective_sample_size(&log_w)
            }
        };
        Ok((est, ess))
    }

    fn apply(&mut self, est: &GradEstimate) {
        let betas = (self.cfg.beta1, self.cfg.beta2);
        adam_step(self.ctrl.params_mut(), &est.theta, &mut self.adam_theta, self.cfg.lr, betas, self.cfg.eps);
        if let (Some(f), Some(g)) = (self.family.as_mut(), est.reparam.as_ref()) {
            adam_step(f.params_mut(), g, &mut self.adam_reparam, self.cfg.lr_reparam, betas, self.cfg.eps);
        }
        if let Some(g) = est.y0 {
            let mut y = [self.y0];
            adam_step(&mut y, &[g], &mut self.adam_y0, self.cfg.lr_y0, betas, self.cfg.eps);
            self.y0 = y[0];
        }
    }

    fn record(&mut self, est: &GradEstimate, ess: f64) -> Result<()> {
        let l2 = match self.gt {
            Some(gt) => {
                control_l2_error(
                    self.ctrl.as_ref(),
                    gt,
                    self.problem,
                    &self.grid,
                    self.cfg.eval_batch,
                    self.cfg.eval_seed,
                    self.cfg.eval_measure,
                )?
                .value
            }
            None => f64::NAN,
        };
        let ema = if l2.is_finite() { self.ema.update(l2, self.cfg.ema_weight) } else { f64::NAN };
        let wall_ms = if self.cfg.record_wall_time { self.started.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        self.log.records.push(EvalRecord {
            iter: self.iteration,
            l2_error: l2,
            l2_error_ema: ema,
            loss: est.loss,
            grad_norm: est.diagnostics.grad_norm,
            ess,
            wall_ms,
        });
        Ok(())
    }

    /// One Adam iteration, evaluating afterwards if the cadence says so.
    pub fn step(&mut self) -> Result<()> {
        if self.log.records.is_empty() {
            let (est, ess) = self.estimate()?;
            self.record(&est, ess)?;
        }
        let (est, ess) = self.estimate()?;
        self.apply(&est);
        if self.ctrl.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged { iteration: self.iteration, reason: "non-finite parameters".into() });
        }
        self.iteration += 1;
        if self.iteration % self.cfg.eval_every == 0 || self.iteration == self.cfg.iterations {
            self.record(&est, ess)?;
        }
        Ok(())
    }

    /// Runs to `cfg.iterations`; on failure restores the last good state and reports why.
    pub fn run(&mut self) -> Result<Option<String>> {
        if self.log.records.is_empty() {
            let (est, ess) = self.estimate()?;
            self.record(&est, ess)?;
        }
        while self.iteration < self.cfg.iterations {
            let good = self.checkpoint();
            if let Err(e) = self.step() {
                let iteration = self.iteration;
                self.restore(&good)?;
                let reason = match e {
                    Error::TrainingDiverged { .. } => e.to_string(),
                    other => Error::TrainingDiverged { iteration, reason: other.to_string() }.to_string(),
                };
                log::warn!("{reason}");
                return Ok(Some(reason));
            }
        }
        Ok(None)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let reparam = self.family.as_ref().map_or(vec![], |f| f.params().to_vec());
        Checkpoint {
            header: CheckpointHeader {
                format: 1,
                loss: self.cfg.loss,
                iteration: self.iteration,
                y0: self.y0,
                adam_y0: self.adam_y0.clone(),
                ema: self.ema,
                log: self.log.clone(),
                theta_len: self.ctrl.num_params(),
                reparam_len: reparam.len(),
                adam_theta_t: self.adam_theta.t,
                adam_reparam_t: self.adam_reparam.t,
            },
            theta: self.ctrl.params().to_vec(),
            reparam,
            adam_theta: self.adam_theta.clone(),
            adam_reparam: self.adam_reparam.clone(),
        }
    }

    pub fn restore(&mut self, cp: &Checkpoint) -> Result<()> {
        let h = &cp.header;
        let nr = self.family.as_ref().map_or(0, |f| f.num_params());
        if h.loss != self.cfg.loss || cp.theta.len() != self.ctrl.num_params() || cp.reparam.len() != nr {
            return Err(Error::Checkpoint("checkpoint does not match this run's loss or architecture".into()));
        }
        self.ctrl.params_mut().copy_from_slice(&cp.theta);
        if let Some(f) = self.family.as_mut() {
            f.params_mut().copy_from_slice(&cp.reparam);
        }
        self.iteration = h.iteration;
        self.y0 = h.y0;
        self.adam_y0 = h.adam_y0.clone();
        self.ema = h.ema;
        self.log = h.log.clone();
        self.adam_theta = cp.adam_theta.clone();
        self.adam_reparam = cp.adam_reparam.clone();
        Ok(())
    }
}

/// Trains `ctrl` (and `family`, for losses that use one) with the configured loss.
pub fn ido_train(
    problem: &SocProblem,
    gt: Option<&GroundTruth>,
    ctrl: Box<dyn ControlFunction>,
    family: Option<ReparamFamily>,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(problem, gt, ctrl, family, cfg)?;
    let halted = trainer.run()?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainOutcome { log: trainer.log, checkpoint, ctrl: trainer.ctrl, family: trainer.family, halted })
}
