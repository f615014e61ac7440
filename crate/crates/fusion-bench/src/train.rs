//! Training loop: Adam with inverse-time learning-rate decay, per-epoch
//! bookkeeping, and repeated runs over a block of consecutive seeds.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::corpus::{make_batches, CorpusSplit, N_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::evaluate_model;
use crate::model::{build_model, forward_on_tape, Model, ModelConfig, STREAM_DROPOUT, STREAM_SHUFFLE};
use crate::nn::{BoundParams, ParamSet};
use crate::objectives::loss_on_tape;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer and schedule settings. Batch size counts whole dialogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub l2_weight: f64,
    pub n_runs: usize,
    pub base_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay: 1e-5,
            epochs: 150,
            batch_size: 20,
            dropout_p: 0.2,
            l2_weight: 1e-5,
            n_runs: 20,
            base_seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr_decay must be non-negative, got {}",
                self.lr_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.l2_weight.is_finite() && self.l2_weight >= 0.0) {
            return Err(Error::Config(format!(
                "l2_weight must be non-negative, got {}",
                self.l2_weight
            )));
        }
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the 0-based step counter.
/// The step's learning rate is lr / (1 + decay * step); bias correction
/// uses the 1-based step.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &crate::nn::Param| ArrayD::<f64>::zeros(p.value.raw_dim());
        AdamState {
            m: params.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
            v: params.iter().map(|(n, p)| (n.clone(), zeros(p))).collect(),
            step: 0,
        }
    }

    pub fn current_lr(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr / (1.0 + cfg.lr_decay * self.step as f64)
    }

    /// One Adam step over every parameter. Returns the learning rate used.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, ArrayD<f64>>,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        let lr_t = self.current_lr(cfg);
        let t = self.step + 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t.min(i32::MAX as u64) as i32);
        for (name, param) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                Error::Training(format!("no gradient for parameter {name}"))
            })?;
            if g.shape() != param.value.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let m = self.m.get_mut(name).expect("moment state tracks parameters");
            let v = self.v.get_mut(name).expect("moment state tracks parameters");
            for ((pv, gv), (mv, vv)) in param
                .value
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            if param.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "parameter {name} became non-finite after update"
                )));
            }
        }
        self.step = t;
        Ok(lr_t)
    }
}

/// Loss components summed over one epoch's batches plus the learning
/// rate of that epoch's last optimizer step. Serializes with the field
/// names the run-log format promises.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_a")]
    pub l_a: Option<f64>,
    #[serde(rename = "L_t")]
    pub l_t: Option<f64>,
    pub lr_t: f64,
}

/// Outcome of one seeded training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub final_wa: f64,
    pub per_class: [Option<f64>; N_CLASSES],
    pub best_epoch_wa: f64,
    pub loss_curve: Vec<f64>,
    pub epoch_log: Vec<EpochRecord>,
}

/// Train one model to completion. The trainer's dropout probability
/// overrides the model config's. Fully deterministic for a given
/// (config, split, seed) triple.
pub fn train_one(
    model_config: &ModelConfig,
    split: &CorpusSplit,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, RunResult)> {
    cfg.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and test splits".into(),
        ));
    }
    let mut mc = model_config.clone();
    mc.dropout_p = cfg.dropout_p;
    let mc = mc.normalized()?;

    let mut model = build_model(&mc, seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(STREAM_DROPOUT);

    let test_batches = make_batches(&split.test, cfg.batch_size, None)?;
    let mut adam = AdamState::new(&model.params);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut epoch_log = Vec::with_capacity(cfg.epochs);
    let mut best_epoch_wa = f64::NEG_INFINITY;
    let mut last_eval = None;

    for epoch in 0..cfg.epochs {
        let order_seed = shuffle_rng.random::<u64>();
        let batches = make_batches(&split.train, cfg.batch_size, Some(order_seed))?;
        let mut sum_total = 0.0;
        let mut sum_s = 0.0;
        let mut sum_a: Option<f64> = None;
        let mut sum_t: Option<f64> = None;
        let mut lr_t = adam.current_lr(cfg);
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bp = BoundParams::bind(&mut tape, &model.params);
            let nodes = forward_on_tape(&mut tape, &bp, &mc, batch, true, Some(&mut dropout_rng))?;
            let l2 = (cfg.l2_weight != 0.0).then_some((cfg.l2_weight, &bp, &model.params));
            let (root, bd) = loss_on_tape(&mut tape, &nodes, batch, mc.loss_mode, l2)?;
            if !bd.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}: l_s={}, l_a={:?}, l_t={:?}, l2={}",
                    bd.l_s, bd.l_a, bd.l_t, bd.l2_penalty
                )));
            }
            let node_grads = tape.backward(root);
            let grads = bp.grads(&tape, &node_grads);
            lr_t = adam.apply(&mut model.params, &grads, cfg)?;
            sum_total += bd.total;
            sum_s += bd.l_s;
            if let Some(a) = bd.l_a {
                *sum_a.get_or_insert(0.0) += a;
            }
            if let Some(t) = bd.l_t {
                *sum_t.get_or_insert(0.0) += t;
            }
        }
        let eval = evaluate_model(&model, &test_batches)?;
        if eval.wa > best_epoch_wa {
            best_epoch_wa = eval.wa;
        }
        loss_curve.push(sum_total);
        epoch_log.push(EpochRecord {
            epoch,
            l_total: sum_total,
            l_s: sum_s,
            l_a: sum_a,
            l_t: sum_t,
            lr_t,
        });
        last_eval = Some(eval);
    }

    let eval = last_eval.expect("at least one epoch ran");
    let run = RunResult {
        seed,
        final_wa: eval.wa,
        per_class: eval.per_class,
        best_epoch_wa,
        loss_curve,
        epoch_log,
    };
    Ok((model, run))
}

/// Successful runs in seed order plus summary statistics of final
/// accuracy. The spread is the sample standard deviation; a single
/// success reports 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateResult {
    pub runs: Vec<RunResult>,
    pub mean_wa: Option<f64>,
    pub std_wa: Option<f64>,
    pub n_runs: usize,
    pub failed_runs: usize,
    pub failures: Vec<(u64, String)>,
}

pub fn mean_sample_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train `cfg.n_runs` models on seeds base_seed, base_seed+1, ... and
/// aggregate. Runs that diverge are counted and excluded; other error
/// kinds abort. `on_run` sees each finished model before it is dropped.
pub fn train_repeated_with<F>(
    model_config: &ModelConfig,
    split: &CorpusSplit,
    cfg: &TrainConfig,
    on_run: F,
) -> Result<AggregateResult>
where
    F: Fn(usize, &Model, &RunResult) -> Result<()> + Sync,
{
    cfg.validate()?;
    let outcomes: Vec<(u64, Result<RunResult>)> = (0..cfg.n_runs)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.base_seed.wrapping_add(k as u64);
            let out = train_one(model_config, split, cfg, seed).and_then(|(model, run)| {
                on_run(k, &model, &run)?;
                Ok(run)
            });
            (seed, out)
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok(run) => runs.push(run),
            Err(e @ Error::Training(_)) => failures.push((seed, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let finals: Vec<f64> = runs.iter().map(|r| r.final_wa).collect();
    let (mean_wa, std_wa) = if finals.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sample_std(&finals);
        (Some(m), Some(s))
    };
    Ok(AggregateResult {
        n_runs: runs.len(),
        failed_runs: failures.len(),
        runs,
        mean_wa,
        std_wa,
        failures,
    })
}

pub fn train_repeated(
    model_config: &ModelConfig,
    split: &CorpusSplit,
    cfg: &TrainConfig,
) -> Result<AggregateResult> {
    train_repeated_with(model_config, split, cfg, |_, _, _| Ok(()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{Dialogue, EmotionLabel, Utterance};
    use crate::model::tests::tiny_config;
    use crate::model::{FusionLayer, FusionMethod, LossMode};
    use ndarray::ArrayD;

    /// Small separable corpus with toy feature widths matching
    /// `tiny_config` (audio 6, text 5). Bypasses `Utterance::new`
    /// because that enforces the full extractor widths.
    pub(crate) fn toy_split(n_train: usize, n_test: usize, utts_per: usize, seed: u64) -> CorpusSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dialogue = |id: usize, session: u8| {
            let utterances = (0..utts_per)
                .map(|u| {
                    let label = EmotionLabel::from_index((id + u) % 4).unwrap();
                    let c = label.index();
                    let mut audio = vec![0.0f32; 6];
                    let mut text = vec![0.0f32; 5];
                    audio[c] = 3.0;
                    text[c] = 3.0;
                    for v in audio.iter_mut().chain(text.iter_mut()) {
                        *v += (rng.random::<f32>() - 0.5) * 0.2;
                    }
                    Utterance {
                        utt_id: format!("toy{id:03}_u{u:02}"),
                        label,
                        audio,
                        text,
                    }
                })
                .collect();
            Dialogue {
                dialogue_id: format!("toy{id:03}"),
                session,
                utterances,
            }
        };
        let train = (0..n_train).map(|i| dialogue(i, (i % 4) as u8 + 1)).collect();
        let test = (0..n_test).map(|i| dialogue(n_train + i, 5)).collect();
        CorpusSplit { train, test }
    }

    pub(crate) fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            epochs,
            batch_size: 4,
            n_runs: 2,
            base_seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_first_step_and_schedule_match_reference() {
        let mut params = ParamSet::new();
        params.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0), false);
        let cfg = TrainConfig {
            lr: 0.1,
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::new(&params);

        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.25));

        // with bias correction the first step is lr * g / (|g| + eps)
        let lr0 = adam.apply(&mut params, &grads, &cfg).unwrap();
        assert_eq!(lr0, 0.1);
        let w = params.get("w").unwrap().value[[0]];
        let expect = 1.0 - 0.1 * 0.25 / (0.25 + ADAM_EPS);
        assert!((w - expect).abs() < 1e-12, "{w} vs {expect}");

        // inverse-time decay over subsequent steps
        let lr1 = adam.apply(&mut params, &grads, &cfg).unwrap();
        let lr2 = adam.apply(&mut params, &grads, &cfg).unwrap();
        assert!((lr1 - 0.1 / 1.5).abs() < 1e-15);
        assert!((lr2 - 0.1 / 2.0).abs() < 1e-15);

        // reference recomputation of all three steps
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 1.0f64);
        for step in 0u64..3 {
            let lr_t = 0.1 / (1.0 + 0.5 * step as f64);
            let g = 0.25;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(step as i32 + 1));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(step as i32 + 1));
            w_ref -= lr_t * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        assert_eq!(params.get("w").unwrap().value[[0]], w_ref);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut params = ParamSet::new();
        params.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0), false);
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[1]), f64::NAN));
        let err = adam.apply(&mut params, &grads, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training(msg) if msg.contains("w")));
    }

    #[test]
    fn training_reduces_loss_on_separable_toy_corpus() {
        let split = toy_split(4, 1, 4, 11);
        let mc = tiny_config(FusionLayer::Lgf, FusionMethod::Add, LossMode::Perspective);
        let cfg = quick_cfg(6);
        let (_, run) = train_one(&mc, &split, &cfg, 3).unwrap();
        assert_eq!(run.loss_curve.len(), 6);
        assert_eq!(run.epoch_log.len(), 6);
        assert!(
            run.loss_curve[5] < run.loss_curve[0],
            "loss did not fall: {:?}",
            run.loss_curve
        );
        // epoch records carry both unimodal components under this loss
        assert!(run.epoch_log[0].l_a.is_some() && run.epoch_log[0].l_t.is_some());
        // learning rate decays monotonically across epochs
        for w in run.epoch_log.windows(2) {
            assert!(w[1].lr_t < w[0].lr_t);
        }
    }

    #[test]
    fn train_one_is_bit_deterministic() {
        let split = toy_split(3, 1, 3, 21);
        let mc = tiny_config(FusionLayer::Mf, FusionMethod::At, LossMode::Perspective);
        let cfg = quick_cfg(3);
        let (model_a, run_a) = train_one(&mc, &split, &cfg, 99).unwrap();
        let (model_b, run_b) = train_one(&mc, &split, &cfg, 99).unwrap();
        for (a, b) in run_a.loss_curve.iter().zip(run_b.loss_curve.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(run_a.final_wa.to_bits(), run_b.final_wa.to_bits());
        for ((na, pa), (nb, pb)) in model_a.params.iter().zip(model_b.params.iter()) {
            assert_eq!(na, nb);
            for (x, y) in pa.value.iter().zip(pb.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // a different seed takes a different path
        let (_, run_c) = train_one(&mc, &split, &cfg, 100).unwrap();
        assert_ne!(
            run_a.loss_curve[0].to_bits(),
            run_c.loss_curve[0].to_bits()
        );
    }

    #[test]
    fn evaluation_never_mutates_parameters() {
        let split = toy_split(2, 1, 3, 5);
        let mc = tiny_config(FusionLayer::Ef, FusionMethod::Concat, LossMode::Single);
        let model = build_model(&mc, 17).unwrap();
        let snapshot: Vec<u64> = model
            .params
            .iter()
            .flat_map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        let batches = make_batches(&split.test, 4, None).unwrap();
        evaluate_model(&model, &batches).unwrap();
        let after: Vec<u64> = model
            .params
            .iter()
            .flat_map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn repeated_runs_aggregate_in_seed_order() {
        let split = toy_split(3, 1, 3, 2);
        let mc = tiny_config(FusionLayer::Lgf, FusionMethod::Add, LossMode::Single);
        let cfg = quick_cfg(2);
        let agg = train_repeated(&mc, &split, &cfg).unwrap();
        assert_eq!(agg.n_runs, 2);
        assert_eq!(agg.failed_runs, 0);
        assert_eq!(agg.runs[0].seed, 7);
        assert_eq!(agg.runs[1].seed, 8);
        let finals: Vec<f64> = agg.runs.iter().map(|r| r.final_wa).collect();
        let (m, s) = mean_sample_std(&finals);
        assert_eq!(agg.mean_wa, Some(m));
        assert_eq!(agg.std_wa, Some(s));

        // aggregation itself is reproducible
        let again = train_repeated(&mc, &split, &cfg).unwrap();
        assert_eq!(agg.mean_wa.unwrap().to_bits(), again.mean_wa.unwrap().to_bits());
    }

    #[test]
    fn invalid_train_configs_are_rejected() {
        let bad = [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { dropout_p: 1.0, ..TrainConfig::default() },
            TrainConfig { n_runs: 0, ..TrainConfig::default() },
            TrainConfig { l2_weight: -1.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
