//! Training loop: detector stub, re-ID forward pass, per-scale identity
//! losses, first-order parameter updates and OIM state maintenance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::detection_losses;
use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::losses::{total_loss_var, IdLabel, LossWeights, OimState};
use crate::pipeline::{detect_scene, slot_labels};
use crate::reid::{reid_forward, ReIDModel};
use crate::synth::Benchmark;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Softmax temperature `τ` of the identity logits.
    pub temperature: f64,
    /// Lookup-table momentum.
    pub momentum: f64,
    /// Focal exponent of the identity loss; 0 gives plain OIM.
    pub gamma: f64,
    /// Lookup-table rows `L`.
    pub identities: usize,
    /// Circular queue capacity `U`.
    pub queue_size: usize,
    pub cls_gamma: f64,
    pub cls_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            temperature: 1.0 / 30.0,
            momentum: 0.5,
            gamma: 2.0,
            identities: 16,
            queue_size: 32,
            cls_gamma: 2.0,
            cls_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) || !(self.cls_gamma >= 0.0) {
            return Err(Error::Config("focal exponents must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.cls_alpha) {
            return Err(Error::Config(format!("loss.cls_alpha {} not in [0, 1]", self.cls_alpha)));
        }
        // remaining checks live in the state constructor
        OimState::new(self.identities, 1, self.queue_size, self.momentum, self.temperature).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Training scenes per step.
    pub batch_scenes: usize,
    /// Momentum coefficient, or Adam's first-moment decay.
    pub beta1: f64,
    /// Adam's second-moment decay.
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Gd,
            step_size: 0.05,
            steps: 2000,
            seed: 0,
            weight_decay: 0.0,
            batch_scenes: 8,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("optimizer.step_size {} must be positive", self.step_size)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("optimizer.weight_decay must be non-negative".into()));
        }
        if self.batch_scenes == 0 {
            return Err(Error::Config("optimizer.batch_scenes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

const ADAM_EPS: f64 = 1e-8;

/// First-order update rule with its running state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: u32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Optimizer {
            second: if matches!(cfg.kind, OptimizerKind::Adam) { zeros.clone() } else { Vec::new() },
            cfg,
            first: zeros,
            t: 0,
        }
    }

    /// Applies one update, in place, to each parameter given its gradient.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let lr = self.cfg.step_size;
        let wd = self.cfg.weight_decay;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let pd = p.data_mut();
            match self.cfg.kind {
                OptimizerKind::Gd => {
                    for (w, &gi) in pd.iter_mut().zip(g.data()) {
                        *w -= lr * (gi + wd * *w);
                    }
                }
                OptimizerKind::Momentum => {
                    let v = self.first[i].data_mut();
                    for ((w, &gi), vi) in pd.iter_mut().zip(g.data()).zip(v) {
                        *vi = b1 * *vi + gi + wd * *w;
                        *w -= lr * *vi;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - b1.powi(self.t as i32);
                    let c2 = 1.0 - b2.powi(self.t as i32);
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((w, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *w -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS) + wd * *w);
                    }
                }
            }
        }
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub oim: f64,
}

pub struct Trainer {
    pub model: ReIDModel,
    /// One state per supervised embedding set.
    pub oim: Vec<OimState>,
    loss: LossConfig,
    opt_cfg: OptimizerConfig,
    optimizer: Optimizer,
    dropout: Dropout,
    detector_noise: f64,
}

impl Trainer {
    pub fn new(model: ReIDModel, loss: LossConfig, opt: OptimizerConfig, detector_noise: f64) -> Result<Self> {
        loss.validate()?;
        opt.validate()?;
        let cfg = model.config();
        let oim = (0..cfg.scheme.num_outputs())
            .map(|_| OimState::new(loss.identities, cfg.scale_width(), loss.queue_size, loss.momentum, loss.temperature))
            .collect::<Result<Vec<_>>>()?;
        let params: Vec<&Tensor> = model.store().iter().map(|(_, _, t)| t).collect();
        let optimizer = Optimizer::new(opt.clone(), &params);
        let dropout = if cfg.dropout > 0.0 {
            Dropout::new(cfg.dropout, opt.seed ^ 0xd0d0)?
        } else {
            Dropout::disabled()
        };
        Ok(Trainer {
            model,
            oim,
            loss,
            opt_cfg: opt,
            optimizer,
            dropout,
            detector_noise,
        })
    }

    fn batch(&self, bench: &Benchmark, step: usize) -> Result<Vec<usize>> {
        if bench.train.is_empty() {
            return Err(Error::Config("the dataset has no training scenes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.opt_cfg.seed);
        rng.set_stream(step as u64 + 1);
        let k = self.opt_cfg.batch_scenes.min(bench.train.len());
        let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, bench.train.len(), k)
            .into_iter()
            .map(|i| bench.train[i])
            .collect();
        picks.sort_unstable();
        Ok(picks)
    }

    /// Loss of batch `step`; when `update` is set, also takes a gradient step
    /// and refreshes the OIM states with the batch features.
    pub fn run_step(&mut self, bench: &Benchmark, step: usize, update: bool) -> Result<StepLoss> {
        let scenes = self.batch(bench, step)?;
        let cfg = self.model.config().clone();
        for &s in &scenes {
            if bench.scene(s).persons.len() > cfg.queries {
                return Err(Error::Config(format!(
                    "scene {s} has more persons than the {} query slots",
                    cfg.queries
                )));
            }
        }
        let n_out = cfg.scheme.num_outputs();
        let (grads, feats, labels, parts) = {
            let mut tape = Tape::new(self.model.store());
            let mut per_scale: Vec<Vec<_>> = vec![Vec::new(); n_out];
            let mut labels: Vec<IdLabel> = Vec::new();
            let (mut cls, mut iou, mut l1) = (0.0, 0.0, 0.0);
            for &s in &scenes {
                let scene = bench.scene(s);
                let seed = self.opt_cfg.seed.wrapping_add(step as u64 * 0x1_0000_0001);
                let dets = detect_scene(scene, cfg.queries, self.detector_noise, seed)?;
                let (c, i, l) = detection_losses(&dets, &scene.boxes(), self.loss.cls_gamma, self.loss.cls_alpha)?;
                cls += c;
                iou += i;
                l1 += l;
                labels.extend(slot_labels(scene, &dets));
                let maps: Vec<_> = scene.pyramid.iter().map(|m| tape.constant(m.clone())).collect();
                let refs = self.model.reference_var(&mut tape, &dets.references())?;
                let outs = reid_forward(&mut tape, &self.model, &maps, refs, &mut self.dropout)?;
                if outs.iter().any(|&o| !tape.value(o).is_finite()) {
                    return Err(Error::Numeric(format!("non-finite activations at step {step}")));
                }
                for (acc, o) in per_scale.iter_mut().zip(outs) {
                    acc.push(tape.l2_normalize_rows(o)?);
                }
            }
            let b = scenes.len() as f64;
            let mut oim_terms = Vec::with_capacity(n_out);
            let mut feats = Vec::with_capacity(n_out);
            for (state, rows) in self.oim.iter().zip(&per_scale) {
                let f = tape.concat_rows(rows)?;
                feats.push(tape.value(f).clone());
                oim_terms.push(state.loss_on_tape(&mut tape, f, &labels, self.loss.gamma)?);
            }
            let mut summed = oim_terms[0];
            for &t in &oim_terms[1..] {
                summed = tape.add(summed, t)?;
            }
            let l_oim = tape.scale(summed, 1.0 / n_out as f64);
            let total = total_loss_var(&mut tape, cls / b, iou / b, l1 / b, l_oim, &self.loss.weights)?;
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            let parts = StepLoss {
                total: value,
                cls: cls / b,
                iou: iou / b,
                l1: l1 / b,
                oim: tape.value(l_oim).item(),
            };
            let grads = if update {
                Some(tape.backward(total)?.param_grads(self.model.store()))
            } else {
                None
            };
            (grads, feats, labels, parts)
        };
        if let Some(grads) = grads {
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
            }
            let mut params: Vec<&mut Tensor> = self.model.store_mut().values_mut().iter_mut().collect();
            self.optimizer.apply(&mut params, &grads);
            for (state, f) in self.oim.iter_mut().zip(&feats) {
                state.update(f, &labels)?;
            }
        }
        Ok(parts)
    }

    /// Runs `steps` updates and returns `steps + 1` losses: entry `k` is the
    /// loss of batch `k` after `k` updates.
    pub fn train(&mut self, bench: &Benchmark, steps: usize, mut progress: impl FnMut(usize, &StepLoss)) -> Result<Vec<StepLoss>> {
        let mut curve = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let l = self.run_step(bench, k, k < steps)?;
            progress(k, &l);
            curve.push(l);
        }
        Ok(curve)
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }
}

/// `step,total,cls,iou,l1,oim` rows.
pub fn loss_curve_csv(curve: &[StepLoss]) -> String {
    let mut out = String::from("step,total,cls,iou,l1,oim\n");
    for (k, l) in curve.iter().enumerate() {
        out.push_str(&format!("{k},{},{},{},{},{}\n", l.total, l.cls, l.iou, l.l1, l.oim));
    }
    out
}
