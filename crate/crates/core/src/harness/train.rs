use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::reference_box;
use super::{AdamConfig, Monitor, TrainConfig};
use crate::diffcore::{NormalizedBox, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LabelMask};
use crate::losses::{lunet_loss_terms, LossWeights};
use crate::nets::{BoxSource, LuNet};
use crate::phantom::PatientRecord;

/// One training frame with its regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageGrid,
    pub mask: LabelMask,
    /// Reference box with margin, normalized.
    pub target: NormalizedBox,
}

/// Every frame of every record, in record order.
pub fn samples_from_records(records: &[PatientRecord], margin: f64) -> Vec<Sample> {
    records
        .iter()
        .flat_map(|r| &r.frames)
        .map(|f| {
            let (bb, _) = reference_box(f, margin);
            Sample {
                image: f.image.clone(),
                mask: f.mask.clone(),
                target: NormalizedBox::from_array(bb.normalized(f.mask.height(), f.mask.width())),
            }
        })
        .collect()
}

/// Adam with bias correction. Parameters are rounded to `f32` after every
/// step so the in-memory model equals its saved form.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    learning_rate: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, learning_rate: f64) -> Self {
        Self {
            config,
            learning_rate,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let step = self.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + epsilon);
                *w = ((*w - step) as f32) as f64;
            }
        }
    }
}

/// Loss terms averaged over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub localization: f64,
    /// Unweighted segmentation term (ROI Dice plus the auxiliary Dice in mu mode).
    pub segmentation: f64,
}

impl LossBreakdown {
    fn monitored(&self, monitor: Monitor) -> f64 {
        match monitor {
            Monitor::Multitask => self.total,
            Monitor::Segmentation => self.segmentation,
        }
    }

    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.localization.is_finite() && self.segmentation.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model.
    pub epoch: usize,
    /// Mean batch loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    pub monitor: Monitor,
}

impl TrainingHistory {
    pub fn initial_validation(&self) -> &LossBreakdown {
        &self.epochs[0].validation
    }

    pub fn best_validation(&self) -> &LossBreakdown {
        &self.epochs[self.best_epoch].validation
    }
}

struct BatchLoss {
    tape: Tape,
    total: crate::diffcore::Var,
    breakdown: LossBreakdown,
    loc_vars: Vec<crate::diffcore::Var>,
    seg_vars: Vec<crate::diffcore::Var>,
}

fn batch_loss(net: &LuNet, batch: &[&Sample], weights: &LossWeights, trainable: bool) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let loc_vars = net.localizer().params().bind(&mut tape, trainable);
    let seg_vars = net.segmenter().params().bind(&mut tape, trainable);
    let images: Vec<&ImageGrid> = batch.iter().map(|s| &s.image).collect();
    let x = tape.constant(LuNet::batch_tensor(&images)?);
    let out = net.forward(&mut tape, &loc_vars, &seg_vars, x, &BoxSource::Predicted)?;
    let masks: Vec<LabelMask> = batch.iter().map(|s| s.mask.clone()).collect();
    let targets: Vec<NormalizedBox> = batch.iter().map(|s| s.target).collect();
    let terms = lunet_loss_terms(&mut tape, &out, &masks, &targets, net.config().localizer.mode, weights)?;
    let seg =
        tape.value(terms.roi_segmentation).item() + terms.auxiliary_segmentation.map_or(0.0, |a| tape.value(a).item());
    let breakdown = LossBreakdown {
        total: tape.value(terms.total).item(),
        localization: tape.value(terms.localization).item(),
        segmentation: seg,
    };
    Ok(BatchLoss {
        tape,
        total: terms.total,
        breakdown,
        loc_vars,
        seg_vars,
    })
}

/// Sample-weighted mean of the loss terms over `samples`.
pub fn validation_loss(net: &LuNet, samples: &[Sample], config: &TrainConfig) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = [0.0; 3];
    for chunk in samples.chunks(config.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let b = batch_loss(net, &batch, &config.weights, false)?.breakdown;
        let n = chunk.len() as f64;
        acc[0] += n * b.total;
        acc[1] += n * b.localization;
        acc[2] += n * b.segmentation;
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown {
        total: acc[0] / n,
        localization: acc[1] / n,
        segmentation: acc[2] / n,
    })
}

fn snapshot(net: &LuNet) -> [ParamStore; 2] {
    let [a, b] = net.stores();
    [a.clone(), b.clone()]
}

fn restore(net: &mut LuNet, saved: &[ParamStore; 2]) -> Result<()> {
    let [a, b] = net.stores_mut();
    a.load_values(&saved[0])?;
    b.load_values(&saved[1])
}

fn dump_state(dir: &Path, net: &LuNet, history: &[EpochRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    net.save(&dir.join("diverged.lunk"))?;
    crate::grid::io::write_json(&history, &dir.join("diverged_history.json"))
}

/// [`train_with`] without a state dump or progress callback.
pub fn train(
    net: &mut LuNet,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    train_with(net, train_set, val_set, config, None, &mut |_| {})
}

/// Trains `net` in place with Adam on the LU-Net loss and leaves it holding
/// the parameters of the best validation epoch. Epoch 0 records the
/// untrained model; training stops once `patience` epochs pass without a
/// strict improvement over the best trained epoch. A non-finite loss aborts
/// with [`Error::DivergedLoss`] after writing the current state to `dump_dir`.
pub fn train_with(
    net: &mut LuNet,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    dump_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainingHistory> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let monitor = config.monitor;
    let mut epochs = Vec::new();
    let diverged = |net: &LuNet, epochs: &[EpochRecord], epoch: usize, value: f64| {
        if let Some(dir) = dump_dir {
            dump_state(dir, net, epochs)?;
        }
        Err(Error::DivergedLoss { epoch, value })
    };

    let initial = validation_loss(net, val_set, config)?;
    let record = EpochRecord {
        epoch: 0,
        train_loss: None,
        validation: initial,
    };
    on_epoch(&record);
    epochs.push(record);
    if !initial.is_finite() {
        return diverged(net, &epochs, 0, initial.total);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(usize, f64, [ParamStore; 2])> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut stopped_epoch = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut b = batch_loss(net, &batch, &config.weights, true)?;
            if !b.breakdown.total.is_finite() {
                return diverged(net, &epochs, epoch, b.breakdown.total);
            }
            sum += b.breakdown.total * chunk.len() as f64;
            b.tape.backward(b.total)?;
            let [loc, seg] = net.stores_mut();
            let mut grads = loc.collect_grads(&mut b.tape, &b.loc_vars);
            grads.extend(seg.collect_grads(&mut b.tape, &b.seg_vars));
            let mut params: Vec<&mut Tensor> = loc
                .tensors_mut()
                .iter_mut()
                .chain(seg.tensors_mut().iter_mut())
                .collect();
            adam.step(&mut params, &grads);
        }
        let validation = validation_loss(net, val_set, config)?;
        let record = EpochRecord {
            epoch,
            train_loss: Some(sum / train_set.len() as f64),
            validation,
        };
        on_epoch(&record);
        epochs.push(record);
        if !validation.is_finite() {
            return diverged(net, &epochs, epoch, validation.total);
        }
        stopped_epoch = epoch;
        let value = validation.monitored(monitor);
        match &best {
            Some((_, v, _)) if value >= *v => {}
            _ => best = Some((epoch, value, snapshot(net))),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= config.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }

    let best_epoch = match best {
        Some((e, _, saved)) => {
            restore(net, &saved)?;
            e
        }
        None => 0,
    };
    Ok(TrainingHistory {
        epochs,
        best_epoch,
        stopped_epoch,
        stop_reason,
        monitor,
    })
}
