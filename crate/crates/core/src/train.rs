//! Deterministic mini-batch training loop.

use rand::seq::SliceRandom;

use crate::error::{ensure, Error, Result};
use crate::eval::{aggregate, evaluate, MetricsReport};
use crate::geometry::NormalMap;
use crate::loss::{hybrid_loss, LossSelector, LossWeights, Targets};
use crate::network::{self, forward, ForwardOptions, Inputs, NetworkConfig, Parameters, SCALES};
use crate::optim::{loss_for_epoch, lr_at_epoch, Gradients, RmsProp, TrainSchedule};
use crate::synth::{build_pyramid, rng_for, Sample};
use crate::tensor::Tape;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Samples with their precomputed target pyramids.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub samples: Vec<Sample>,
    pyramids: Vec<Vec<NormalMap>>,
}

impl TrainData {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let pyramids = samples.iter().map(|s| build_pyramid(&s.normals, SCALES)).collect::<Result<_>>()?;
        Ok(Self { samples, pyramids })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Everything needed to continue training: parameters, optimizer state and
/// the position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Parameters<f32>,
    pub optimizer: RmsProp<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(cfg: &NetworkConfig, schedule: &TrainSchedule) -> Result<Self> {
        let params = network::build::<f32>(cfg, schedule.seed)?;
        let optimizer = RmsProp::new(&params, lr_at_epoch(schedule, 0));
        Ok(Self { params, optimizer, epoch: 0, step: 0 })
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub seeds: Vec<u64>,
}

impl StepRecord {
    /// `epoch,step,lr,loss`
    pub fn log_line(&self) -> String {
        format!("{},{},{:e},{:.9e}", self.epoch, self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub selector: LossSelector,
    pub mean_loss: f64,
    pub validation: Option<MetricsReport>,
}

impl EpochRecord {
    /// `epoch,<n>,mean_loss,<v>[,mean,median,f11,f22,f30,count]`
    pub fn log_line(&self) -> String {
        let mut s = format!("epoch,{},mean_loss,{:.9e}", self.epoch, self.mean_loss);
        if let Some(m) = &self.validation {
            s.push_str(&format!(
                ",val,{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                m.mean, m.median, m.within[0], m.within[1], m.within[2], m.count
            ));
        }
        s
    }
}

/// Progress notifications; the state is the one after the event.
pub enum Event<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord, &'a TrainState),
}

/// Sample order for `epoch`: a permutation that depends only on the seed and
/// the epoch, so a resumed run sees the same batches.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, SHUFFLE_STREAM + epoch as u64));
    order
}

/// One optimizer step on the samples at `indices`. Returns the loss and the
/// gradient norm; a non-finite value aborts with the batch seeds.
pub fn train_step(
    state: &mut TrainState,
    cfg: &NetworkConfig,
    data: &TrainData,
    indices: &[usize],
    weights: &LossWeights,
    selector: LossSelector,
) -> Result<(f64, f64)> {
    let seeds = || indices.iter().map(|&i| data.samples[i].seed).collect::<Vec<_>>();
    let pairs: Vec<_> = indices.iter().map(|&i| (&data.samples[i].rgb, &data.samples[i].depth)).collect();
    let inputs = Inputs::<f32>::from_images(&pairs)?;
    let pyramids: Vec<&[NormalMap]> = indices.iter().map(|&i| data.pyramids[i].as_slice()).collect();
    let targets = Targets::<f32>::from_pyramids(&pyramids)?;

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let vars = inputs.record(&mut tape, cfg)?;
    let out = forward(&mut tape, &bound, cfg, &vars, &ForwardOptions::default())?;
    let loss = hybrid_loss(&mut tape, &out, &targets, weights, selector)?;
    let value = tape.value(loss.total).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {value} on batch with seeds {:?}", seeds())));
    }
    tape.backward(loss.total)?;
    let mut grads = Gradients::collect(&tape, &bound);
    drop(bound);
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm on batch with seeds {:?}", seeds())));
    }
    state.optimizer.step(&mut state.params, &mut grads)?;
    state.step += 1;
    Ok((value, norm))
}

/// Final-scale predictions against the analytic normals, pooled over pixels.
pub fn validate(params: &Parameters<f32>, cfg: &NetworkConfig, samples: &[Sample]) -> Result<MetricsReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let (pred, _) = network::predict(params, cfg, &s.rgb, &s.depth)?;
            evaluate(&pred, &s.clean_normals)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&reports)
}

/// Runs epochs `state.epoch .. schedule.epochs`.
pub fn train(
    state: &mut TrainState,
    cfg: &NetworkConfig,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    data: &TrainData,
    validation: &[Sample],
    on_event: impl FnMut(Event<'_>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    train_until(state, cfg, schedule, weights, data, validation, schedule.epochs, on_event)
}

/// Like [`train`] but stops before epoch `until` (clamped to the schedule),
/// so a run can be split into stages that resume bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn train_until(
    state: &mut TrainState,
    cfg: &NetworkConfig,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    data: &TrainData,
    validation: &[Sample],
    until: usize,
    mut on_event: impl FnMut(Event<'_>) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    schedule.validate()?;
    weights.validate()?;
    ensure!(!data.is_empty(), "training set is empty");
    for s in data.samples.iter().chain(validation) {
        ensure!(
            s.rgb.width == cfg.width && s.rgb.height == cfg.height,
            "sample {} is {}x{}, network expects {}x{}",
            s.seed,
            s.rgb.width,
            s.rgb.height,
            cfg.width,
            cfg.height
        );
    }
    let mut records = Vec::new();
    while state.epoch < until.min(schedule.epochs) {
        let epoch = state.epoch;
        let lr = lr_at_epoch(schedule, epoch);
        state.optimizer.lr = lr;
        let selector = loss_for_epoch(epoch, schedule);
        let order = epoch_order(data.len(), schedule.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(schedule.batch_size) {
            let (loss, grad_norm) = train_step(state, cfg, data, chunk, weights, selector)?;
            total += loss;
            batches += 1;
            let rec = StepRecord {
                epoch,
                step: state.step,
                lr,
                loss,
                grad_norm,
                seeds: chunk.iter().map(|&i| data.samples[i].seed).collect(),
            };
            log::debug!("{}", rec.log_line());
            on_event(Event::Step(&rec))?;
        }
        let validation = if validation.is_empty() { None } else { Some(validate(&state.params, cfg, validation)?) };
        state.epoch += 1;
        let rec = EpochRecord { epoch, selector, mean_loss: total / batches as f64, validation };
        log::info!("{}", rec.log_line());
        on_event(Event::Epoch(&rec, state))?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sample, CorruptionSpec, DatasetSpec, SceneDistribution};

    fn tiny() -> (NetworkConfig, DatasetSpec) {
        let cfg = NetworkConfig {
            height: 16,
            width: 16,
            rgb_widths: [4, 4, 8, 8, 8],
            rgb_convs: [1, 1, 1, 1, 1],
            depth_widths: [4, 4, 8, 8],
            depth_convs: [1, 1, 1, 1],
            confidence_widths: [4, 4, 4, 4, 1],
            ..Default::default()
        };
        let data = DatasetSpec {
            scene: SceneDistribution { width: 16, height: 16, ..Default::default() },
            corruption: CorruptionSpec::default(),
            gt_noise: None,
        };
        (cfg, data)
    }

    fn dataset(spec: &DatasetSpec, seeds: std::ops::Range<u64>) -> TrainData {
        TrainData::new(seeds.map(|s| generate_sample(spec, s).unwrap()).collect()).unwrap()
    }

    fn schedule(epochs: usize) -> TrainSchedule {
        TrainSchedule { epochs, warmup_epochs: 1, batch_size: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 3);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 1, 3));
        assert_ne!(a, epoch_order(10, 1, 4));
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let (cfg, spec) = tiny();
        let data = dataset(&spec, 0..4);
        let s = schedule(2);
        let run = || {
            let mut st = TrainState::fresh(&cfg, &s).unwrap();
            train(&mut st, &cfg, &s, &LossWeights::default(), &data, &[], |_| Ok(())).unwrap();
            st
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, spec) = tiny();
        let data = dataset(&spec, 0..4);
        let s = schedule(3);
        let w = LossWeights::default();
        let mut full = TrainState::fresh(&cfg, &s).unwrap();
        train(&mut full, &cfg, &s, &w, &data, &[], |_| Ok(())).unwrap();

        let mut part = TrainState::fresh(&cfg, &s).unwrap();
        let mut saved = None;
        train(&mut part, &cfg, &s, &w, &data, &[], |e| {
            if let Event::Epoch(r, st) = e {
                if r.epoch == 0 {
                    saved = Some(st.clone());
                }
            }
            Ok(())
        })
        .unwrap();
        let mut resumed = saved.unwrap();
        assert_eq!(resumed.epoch, 1);
        train(&mut resumed, &cfg, &s, &w, &data, &[], |_| Ok(())).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn step_log_is_finite_and_parseable() {
        let (cfg, spec) = tiny();
        let data = dataset(&spec, 0..3);
        let s = schedule(2);
        let mut st = TrainState::fresh(&cfg, &s).unwrap();
        let mut lines = Vec::new();
        let recs = train(&mut st, &cfg, &s, &LossWeights::default(), &data, &data.samples[..1], |e| {
            if let Event::Step(r) = e {
                assert!(r.grad_norm.is_finite());
                lines.push(r.log_line());
            }
            Ok(())
        })
        .unwrap();
        // 3 samples at batch size 2 → 2 steps per epoch
        assert_eq!(lines.len(), 4);
        for (k, l) in lines.iter().enumerate() {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4);
            assert_eq!(f[1].parse::<usize>().unwrap(), k + 1);
            assert!(f[3].parse::<f64>().unwrap().is_finite());
        }
        assert_eq!(recs[0].selector, LossSelector::AllL2);
        assert_eq!(recs[1].selector, LossSelector::Hybrid);
        assert!(recs[1].validation.as_ref().unwrap().is_defined());
    }

    #[test]
    fn non_finite_loss_names_batch_seeds() {
        let (cfg, spec) = tiny();
        let data = dataset(&spec, 10..12);
        let s = schedule(2);
        let mut st = TrainState::fresh(&cfg, &s).unwrap();
        for t in st.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
        }
        let err = train(&mut st, &cfg, &s, &LossWeights::default(), &data, &[], |_| Ok(())).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Numerical(_)), "{msg}");
        assert!(msg.contains("10") && msg.contains("11"), "{msg}");
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let (cfg, mut spec) = tiny();
        spec.scene.width = 32;
        spec.scene.height = 32;
        let data = dataset(&spec, 0..1);
        let s = schedule(2);
        let mut st = TrainState::fresh(&cfg, &s).unwrap();
        assert!(train(&mut st, &cfg, &s, &LossWeights::default(), &data, &[], |_| Ok(())).is_err());
    }
}
