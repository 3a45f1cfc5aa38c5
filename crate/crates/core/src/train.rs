//! Epoch schedules for alternating loss correction and the baselines, the
//! minibatch loop and the optimizers.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Label, LabeledExample};
use crate::error::{Error, Result};
use crate::net::{backward, Batch, LossKind, ModelParams};
use crate::noise::CorruptionMatrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Alternate: noisy data with corrected loss on even epochs, clean data
    /// with plain loss on odd epochs.
    #[serde(rename = "ALC")]
    Alc,
    /// Corrected noisy epochs, then plain clean epochs.
    #[serde(rename = "GLC_noisy_then_clean")]
    GlcNoisyThenClean,
    /// Plain clean epochs, then corrected noisy epochs.
    #[serde(rename = "GLC_clean_then_noisy")]
    GlcCleanThenNoisy,
    #[serde(rename = "NoLC_clean")]
    NoLcClean,
    #[serde(rename = "NoLC_noisy")]
    NoLcNoisy,
    /// Clean and noisy examples pooled, no correction.
    #[serde(rename = "NoLC_mixed")]
    NoLcMixed,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Alc,
        Method::GlcNoisyThenClean,
        Method::GlcCleanThenNoisy,
        Method::NoLcMixed,
        Method::NoLcClean,
        Method::NoLcNoisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Alc => "ALC",
            Method::GlcNoisyThenClean => "GLC_noisy_then_clean",
            Method::GlcCleanThenNoisy => "GLC_clean_then_noisy",
            Method::NoLcClean => "NoLC_clean",
            Method::NoLcNoisy => "NoLC_noisy",
            Method::NoLcMixed => "NoLC_mixed",
        }
    }

    /// Row label in the style of the published comparison table.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Alc => "ALC - D* ~ D~",
            Method::GlcNoisyThenClean => "GLC - D~ then D*",
            Method::GlcCleanThenNoisy => "GLC - D* then D~",
            Method::NoLcMixed => "No-LC - D* + D~",
            Method::NoLcClean => "No-LC - D*",
            Method::NoLcNoisy => "No-LC - D~",
        }
    }

    pub fn needs_correction(self) -> bool {
        matches!(self, Method::Alc | Method::GlcNoisyThenClean | Method::GlcCleanThenNoisy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Clean,
    Noisy,
    Mixed,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Clean => "clean",
            DatasetTag::Noisy => "noisy",
            DatasetTag::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTag {
    Plain,
    Corrected,
}

impl LossTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LossTag::Plain => "plain",
            LossTag::Corrected => "corrected",
        }
    }
}

pub type EpochPlan = Vec<(DatasetTag, LossTag)>;

const NOISY_CORRECTED: (DatasetTag, LossTag) = (DatasetTag::Noisy, LossTag::Corrected);
const CLEAN_PLAIN: (DatasetTag, LossTag) = (DatasetTag::Clean, LossTag::Plain);

/// Per-epoch dataset and loss. Sequential methods split the budget as
/// `ceil(n/2)` epochs for the first phase and `floor(n/2)` for the second.
pub fn plan_epochs(method: Method, n_epochs: usize) -> EpochPlan {
    let first = n_epochs.div_ceil(2);
    (0..n_epochs)
        .map(|e| match method {
            Method::Alc if e % 2 == 1 => CLEAN_PLAIN,
            Method::Alc => NOISY_CORRECTED,
            Method::GlcNoisyThenClean if e < first => NOISY_CORRECTED,
            Method::GlcNoisyThenClean => CLEAN_PLAIN,
            Method::GlcCleanThenNoisy if e < first => CLEAN_PLAIN,
            Method::GlcCleanThenNoisy => NOISY_CORRECTED,
            Method::NoLcClean => CLEAN_PLAIN,
            Method::NoLcNoisy => (DatasetTag::Noisy, LossTag::Plain),
            Method::NoLcMixed => (DatasetTag::Mixed, LossTag::Plain),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub method: Method,
    pub d_emb: usize,
    pub d_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            method: Method::Alc,
            d_emb: 64,
            d_hidden: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_epochs == 0 {
            return Err(Error::config("n_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.d_emb == 0 || self.d_hidden == 0 {
            return Err(Error::config("d_emb", "model dimensions must be positive"));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    m: Option<ModelParams>,
    v: Option<ModelParams>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState { step: 0, m: None, v: None }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

/// Applies one update. The parameters are left untouched if any updated
/// value would be non-finite.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.dims != grads.dims {
        return Err(Error::config("gradients", "shape does not match parameters"));
    }
    let lr = config.learning_rate;
    let mut updates: Vec<Vec<f64>> = Vec::with_capacity(13);
    match config.optimizer {
        Optimizer::Sgd => {
            for ((_, p), (_, g)) in params.tensors().into_iter().zip(grads.tensors()) {
                updates.push(p.data.iter().zip(&g.data).map(|(p, g)| p - lr * g).collect());
            }
        }
        Optimizer::Adam => {
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let m = state.m.get_or_insert_with(|| ModelParams::zeros(params.dims));
            let v = state.v.get_or_insert_with(|| ModelParams::zeros(params.dims));
            for ((((_, p), (_, g)), (_, m)), (_, v)) in params
                .tensors()
                .into_iter()
                .zip(grads.tensors())
                .zip(m.tensors_mut())
                .zip(v.tensors_mut())
            {
                let mut out = Vec::with_capacity(p.data.len());
                for i in 0..p.data.len() {
                    let gi = g.data[i];
                    m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                    v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = m.data[i] / bc1;
                    let v_hat = v.data[i] / bc2;
                    out.push(p.data[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
                }
                updates.push(out);
            }
        }
    }
    for ((name, _), u) in params.tensors().into_iter().zip(&updates) {
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("update of {name}")));
        }
    }
    for ((_, p), u) in params.tensors_mut().into_iter().zip(updates) {
        p.data = u;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub dataset: DatasetTag,
    pub loss: LossTag,
    /// Mean example loss over the epoch, each batch evaluated before its update.
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,dataset_tag,loss_kind,mean_loss\n");
        for e in &self.log {
            out.push_str(&format!("{},{},{},{:.9}\n", e.epoch, e.dataset.as_str(), e.loss.as_str(), e.mean_loss));
        }
        out
    }
}

/// Clean examples with their clean labels.
fn clean_pool(d_star: &[LabeledExample]) -> Vec<(&LabeledExample, Label)> {
    d_star.iter().filter_map(|e| e.clean_label.map(|l| (e, l))).collect()
}

fn noisy_pool(d_tilde: &[LabeledExample]) -> Vec<(&LabeledExample, Label)> {
    d_tilde.iter().filter_map(|e| e.noisy_label.map(|l| (e, l))).collect()
}

/// Clean set plus noisy examples not already present in it; subjects in both
/// keep their clean label.
fn mixed_pool<'a>(d_star: &'a [LabeledExample], d_tilde: &'a [LabeledExample]) -> Vec<(&'a LabeledExample, Label)> {
    let mut pool = clean_pool(d_star);
    let seen: HashSet<&str> = pool.iter().map(|(e, _)| e.record.patient_id.as_str()).collect();
    pool.extend(
        noisy_pool(d_tilde)
            .into_iter()
            .filter(|(e, _)| !seen.contains(e.record.patient_id.as_str())),
    );
    pool
}

/// Runs the method's epoch plan from `params`. Each epoch shuffles its pool
/// with a stream derived from `(seed, epoch)`.
pub fn train(
    mut params: ModelParams,
    d_star: &[LabeledExample],
    d_tilde: &[LabeledExample],
    c: Option<&CorruptionMatrix>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let plan = plan_epochs(config.method, config.n_epochs);
    let pools = [
        clean_pool(d_star),
        noisy_pool(d_tilde),
        mixed_pool(d_star, d_tilde),
    ];
    // validate the whole plan before spending any compute
    for (epoch, &(data, loss)) in plan.iter().enumerate() {
        let pool = &pools[data as usize];
        if pool.is_empty() {
            return Err(Error::EmptyDataset(format!("epoch {epoch} needs the {} dataset", data.as_str())));
        }
        if loss == LossTag::Corrected && c.is_none() {
            return Err(Error::config("c_matrix", format!("epoch {epoch} uses the corrected loss")));
        }
    }
    let mut state = OptimizerState::new();
    let mut log = Vec::with_capacity(plan.len());
    for (epoch, &(data, loss_tag)) in plan.iter().enumerate() {
        let kind = match loss_tag {
            LossTag::Plain => LossKind::Plain,
            LossTag::Corrected => LossKind::Corrected(*c.expect("checked above")),
        };
        let pool = &pools[data as usize];
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[rng::tag("shuffle"), epoch as u64]));
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let batch = Batch::from_examples(idx.iter().map(|&i| pool[i]));
            let (mean, grads) = backward(&batch, &params, &kind)?;
            total += mean * batch.len() as f64;
            optimizer_step(&mut params, &grads, &mut state, config)?;
        }
        log.push(EpochLog {
            epoch,
            dataset: data,
            loss: loss_tag,
            mean_loss: total / pool.len() as f64,
        });
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Dims};
    use proptest::prelude::*;

    #[test]
    fn alc_plan() {
        assert_eq!(
            plan_epochs(Method::Alc, 4),
            vec![NOISY_CORRECTED, CLEAN_PLAIN, NOISY_CORRECTED, CLEAN_PLAIN]
        );
        assert_eq!(plan_epochs(Method::Alc, 1), vec![NOISY_CORRECTED]);
    }

    #[test]
    fn glc_plans() {
        let p = plan_epochs(Method::GlcNoisyThenClean, 10);
        assert_eq!(p[..5], [NOISY_CORRECTED; 5]);
        assert_eq!(p[5..], [CLEAN_PLAIN; 5]);
        let p = plan_epochs(Method::GlcCleanThenNoisy, 5);
        assert_eq!(p[..3], [CLEAN_PLAIN; 3]);
        assert_eq!(p[3..], [NOISY_CORRECTED; 2]);
        assert!(plan_epochs(Method::NoLcMixed, 3).iter().all(|&e| e == (DatasetTag::Mixed, LossTag::Plain)));
        assert!(plan_epochs(Method::NoLcNoisy, 3).iter().all(|&e| e == (DatasetTag::Noisy, LossTag::Plain)));
        assert!(plan_epochs(Method::NoLcClean, 3).iter().all(|&e| e == CLEAN_PLAIN));
    }

    proptest! {
        #[test]
        fn plan_invariants(n in 1usize..40) {
            for m in Method::ALL {
                let plan = plan_epochs(m, n);
                prop_assert_eq!(plan.len(), n);
                for &(d, l) in &plan {
                    prop_assert!(!(l == LossTag::Corrected && d == DatasetTag::Clean));
                }
            }
            let alc = plan_epochs(Method::Alc, n);
            for w in alc.windows(2) {
                prop_assert_ne!(w[0], w[1]);
            }
            if n % 2 == 0 {
                prop_assert_eq!(*alc.last().unwrap(), CLEAN_PLAIN);
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    fn small_params() -> ModelParams {
        init_params(Dims::new(5, 3, 2).unwrap(), 1)
    }

    #[test]
    fn sgd_steps() {
        let mut p = small_params();
        let before = p.clone();
        let zero = ModelParams::zeros(p.dims);
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        optimizer_step(&mut p, &zero, &mut OptimizerState::new(), &cfg).unwrap();
        assert_eq!(p, before);
        let mut ones = zero.clone();
        ones.b_alpha.data[0] = 1.0;
        optimizer_step(&mut p, &ones, &mut OptimizerState::new(), &cfg).unwrap();
        assert!((before.b_alpha.data[0] - p.b_alpha.data[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut p = small_params();
        let before = p.clone();
        let mut g = ModelParams::zeros(p.dims);
        g.w_out.data[0] = f64::NAN;
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        let err = optimizer_step(&mut p, &g, &mut OptimizerState::new(), &cfg).unwrap_err();
        assert!(err.to_string().contains("w_out"), "{err}");
        assert_eq!(p, before);
    }

    proptest! {
        #[test]
        fn adam_matches_reference_and_is_bounded(gs in proptest::collection::vec(-5.0f64..5.0, 1..6), lr in 1e-4f64..1e-1) {
            // reference formula on a scalar, compared with the b_alpha coordinate
            let cfg = TrainConfig { learning_rate: lr, ..TrainConfig::default() };
            let mut p = small_params();
            let mut state = OptimizerState::new();
            let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, p.b_alpha.data[0]);
            for (t, &g) in gs.iter().enumerate() {
                let mut grads = ModelParams::zeros(p.dims);
                grads.b_alpha.data[0] = g;
                let before = p.b_alpha.data[0];
                optimizer_step(&mut p, &grads, &mut state, &cfg).unwrap();
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let k = (t + 1) as i32;
                theta -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
                prop_assert!((p.b_alpha.data[0] - theta).abs() < 1e-12);
                // |m_hat| <= sqrt(v_hat) * (1-b1)/sqrt(1-b2) * ... stays near lr early on
                prop_assert!((p.b_alpha.data[0] - before).abs() <= lr * 3.2);
            }
            prop_assert!((p.b_alpha.data[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        let mut p = small_params();
        let before = p.clone();
        let mut g = ModelParams::zeros(p.dims);
        g.w_beta.data.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64 - 2.0) * 0.37);
        optimizer_step(&mut p, &g, &mut OptimizerState::new(), &cfg).unwrap();
        for (a, b) in before.w_beta.data.iter().zip(&p.w_beta.data) {
            assert!((a - b).abs() <= cfg.learning_rate * (1.0 + 1e-6));
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            n_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "n_epochs", .. })));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
