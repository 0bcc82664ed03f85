//! Online instance matching losses and the weighted training objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{l2_normalize, Tensor};

/// Identity supervision for one embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdLabel {
    Labeled(usize),
    /// A person whose identity is not annotated; feeds the queue.
    Unlabeled,
    /// A slot with no matching person; ignored entirely.
    Background,
}

/// Largest tolerated deviation of a feature norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Lookup table of labeled prototypes plus a bounded FIFO of unlabeled features.
#[derive(Debug, Clone, PartialEq)]
pub struct OimState {
    lut: Tensor,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
    momentum: f64,
    temperature: f64,
}

impl OimState {
    /// A table of `identities` zero rows of width `dim` and an empty queue.
    pub fn new(identities: usize, dim: usize, capacity: usize, momentum: f64, temperature: f64) -> Result<Self> {
        if identities == 0 || dim == 0 {
            return Err(Error::Config("OIM table needs at least one identity and one feature".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("OIM momentum {momentum} not in [0, 1]")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("OIM temperature {temperature} must be positive")));
        }
        Ok(OimState {
            lut: Tensor::zeros(&[identities, dim]),
            queue: VecDeque::with_capacity(capacity),
            capacity,
            momentum,
            temperature,
        })
    }

    /// Rebuilds a state from stored parts; queue rows are oldest first.
    pub fn from_parts(
        lut: Tensor,
        queue: Vec<Vec<f64>>,
        capacity: usize,
        momentum: f64,
        temperature: f64,
    ) -> Result<Self> {
        if lut.ndim() != 2 {
            return Err(Error::shape("OimState", lut.shape(), &[0, 0]));
        }
        let mut s = OimState::new(lut.rows(), lut.cols(), capacity, momentum, temperature)?;
        if queue.len() > capacity || queue.iter().any(|r| r.len() != lut.cols()) {
            return Err(Error::Invalid("OIM queue does not fit the table".into()));
        }
        s.lut = lut;
        s.queue = queue.into();
        Ok(s)
    }

    pub fn lut(&self) -> &Tensor {
        &self.lut
    }

    pub fn queue(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn identities(&self) -> usize {
        self.lut.rows()
    }

    pub fn dim(&self) -> usize {
        self.lut.cols()
    }

    /// `[lut; queue]` as one `(L + |queue|) × D` matrix.
    pub fn bank(&self) -> Tensor {
        let mut data = self.lut.data().to_vec();
        for r in &self.queue {
            data.extend_from_slice(r);
        }
        Tensor::new(vec![self.identities() + self.queue.len(), self.dim()], data)
            .expect("bank rows share the table width")
    }

    /// Queue rows as a matrix, oldest first; `None` when empty.
    pub fn queue_tensor(&self) -> Option<Tensor> {
        if self.queue.is_empty() {
            return None;
        }
        let data = self.queue.iter().flatten().copied().collect();
        Some(Tensor::new(vec![self.queue.len(), self.dim()], data).expect("queue rows share the table width"))
    }

    fn check(&self, features: &Tensor, labels: &[IdLabel]) -> Result<()> {
        if features.ndim() != 2 || features.cols() != self.dim() || features.rows() != labels.len() {
            return Err(Error::shape(
                "oim_loss",
                features.shape(),
                &[labels.len(), self.dim()],
            ));
        }
        for (r, l) in labels.iter().enumerate() {
            if let IdLabel::Labeled(id) = *l {
                if id >= self.identities() {
                    return Err(Error::Invalid(format!(
                        "identity {id} outside the {}-entry table",
                        self.identities()
                    )));
                }
            }
            if *l != IdLabel::Background {
                let norm = features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::Invalid(format!("feature row {r} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Records the focal OIM loss of `features` on the tape without touching
    /// the state. Only labeled rows are scored.
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, features: Var, labels: &[IdLabel], gamma: f64) -> Result<Var> {
        self.check(tape.value(features), labels)?;
        let bank_t = crate::tensor::transpose(&self.bank())?;
        let bank_t = tape.constant(bank_t);
        let sims = tape.matmul(features, bank_t)?;
        let logits = tape.scale(sims, 1.0 / self.temperature);
        let targets: Vec<Option<usize>> = labels
            .iter()
            .map(|l| match l {
                IdLabel::Labeled(id) => Some(*id),
                _ => None,
            })
            .collect();
        tape.focal_cross_entropy(logits, &targets, gamma)
    }

    /// Momentum update of labeled prototypes, then queue insertion of
    /// unlabeled rows, in row order.
    pub fn update(&mut self, features: &Tensor, labels: &[IdLabel]) -> Result<()> {
        self.check(features, labels)?;
        let d = self.dim();
        for (r, l) in labels.iter().enumerate() {
            let x = features.row(r);
            match *l {
                IdLabel::Labeled(id) => {
                    let row = &mut self.lut.data_mut()[id * d..(id + 1) * d];
                    let mixed: Vec<f64> = row
                        .iter()
                        .zip(x)
                        .map(|(a, b)| self.momentum * a + (1.0 - self.momentum) * b)
                        .collect();
                    row.copy_from_slice(&l2_normalize(&mixed));
                }
                IdLabel::Unlabeled => {
                    if self.capacity == 0 {
                        continue;
                    }
                    if self.queue.len() == self.capacity {
                        self.queue.pop_front();
                    }
                    self.queue.push_back(x.to_vec());
                }
                IdLabel::Background => {}
            }
        }
        Ok(())
    }
}

/// Focal OIM loss followed by the state update. With `gamma = 0` this is the
/// plain OIM loss.
pub fn focal_oim_loss(features: &Tensor, labels: &[IdLabel], state: &mut OimState, gamma: f64) -> Result<f64> {
    let loss = {
        let mut tape = Tape::default();
        let f = tape.constant(features.clone());
        let l = state.loss_on_tape(&mut tape, f, labels, gamma)?;
        tape.value(l).item()
    };
    state.update(features, labels)?;
    Ok(loss)
}

pub fn oim_loss(features: &Tensor, labels: &[IdLabel], state: &mut OimState) -> Result<f64> {
    focal_oim_loss(features, labels, state, 0.0)
}

/// Weights of the classification, IoU, Smooth-L1 and identity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub oim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            iou: 5.0,
            l1: 2.0,
            oim: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.cls, self.iou, self.l1, self.oim] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub fn total_loss(l_cls: f64, l_iou: f64, l_l1: f64, l_oim: f64, w: &LossWeights) -> f64 {
    w.cls * l_cls + w.iou * l_iou + w.l1 * l_l1 + w.oim * l_oim
}

/// [`total_loss`] with a differentiable identity term; the box terms enter
/// as constants.
pub fn total_loss_var(tape: &mut Tape<'_>, l_cls: f64, l_iou: f64, l_l1: f64, l_oim: Var, w: &LossWeights) -> Result<Var> {
    let fixed = tape.constant(Tensor::scalar(total_loss(l_cls, l_iou, l_l1, 0.0, w)));
    let id = tape.scale(l_oim, w.oim);
    tape.add(fixed, id)
}
