//! Seeded synthetic hospital cohorts standing in for a de-identified EHR
//! extract: mothers with longitudinal pre-delivery visits and a delivery
//! encounter, newborns with a birth encounter, and the true links between them.
//!
//! Each mother falls in one of three segments. Clean-only mothers carry
//! unambiguous delivery codes but no newborn record; noisy-only mothers carry
//! only ambiguous delivery codes and have a newborn; overlap mothers have both.
//! Pre-delivery visits draw "risk" codes with lifted odds for preterm mothers,
//! which is the signal the classifier learns. Newborn timestamps copy the
//! mother's delivery encounter plus clerical noise.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    apply_min_visit_filter, classify_delivery, merge_same_day, truncate_at_prediction_point, CodeVocabulary, Label,
    LabeledExample, PatientRecord, Role, Visit, MINUTES_PER_DAY,
};
use crate::error::{Error, Result};
use crate::linkage::{derive_noisy_labels, LinkSet};
use crate::{par, rng};

const FULLTERM_DELIVERY: &[&str] = &["650", "645.11", "645.21", "649.8", "652.5"];
const PRETERM_DELIVERY: &[&str] = &["644.21", "644.20", "640.01"];
const AMBIGUOUS_DELIVERY: &[&str] = &["V27.0", "V27.2", "669.71", "644.03"];
const PRETERM_NEWBORN: &[&str] = &[
    "765.21", "765.22", "765.23", "765.24", "765.25", "765.26", "765.27", "765.28", "765.14", "765.15", "765.16",
    "765.17", "765.18",
];
const FULLTERM_NEWBORN: &[&str] = &["765.29"];
const LIVEBORN: &str = "V30.00";
const OTHER_NEWBORN: &[&str] = &[LIVEBORN, "V30.01", "765.20"];

fn n_special_codes() -> usize {
    FULLTERM_DELIVERY.len()
        + PRETERM_DELIVERY.len()
        + AMBIGUOUS_DELIVERY.len()
        + PRETERM_NEWBORN.len()
        + FULLTERM_NEWBORN.len()
        + OTHER_NEWBORN.len()
}

/// Clerical error channels between a mother's delivery encounter and her
/// newborn's birth record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClericalNoiseModel {
    /// Independent Gaussian jitter on each newborn timestamp, minutes.
    pub time_jitter_sd: f64,
    /// Newborns never recorded.
    pub missing_newborn_rate: f64,
    /// Width of a registration offset shared by both newborn timestamps,
    /// uniform in `±swap_window_minutes / 2`; large offsets move the newborn
    /// closer to a neighbouring delivery.
    pub swap_window_minutes: i64,
    /// Newborns coded with the opposite prematurity class.
    pub misclassified_newborn_rate: f64,
    /// Newborns whose birth codes carry no prematurity class.
    pub unclassifiable_newborn_rate: f64,
}

impl Default for ClericalNoiseModel {
    fn default() -> Self {
        ClericalNoiseModel {
            time_jitter_sd: 180.0,
            missing_newborn_rate: 0.15,
            swap_window_minutes: 360,
            misclassified_newborn_rate: 0.05,
            unclassifiable_newborn_rate: 0.03,
        }
    }
}

impl ClericalNoiseModel {
    pub fn none() -> Self {
        ClericalNoiseModel {
            time_jitter_sd: 0.0,
            missing_newborn_rate: 0.0,
            swap_window_minutes: 0,
            misclassified_newborn_rate: 0.0,
            unclassifiable_newborn_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_unit("clerical_noise.missing_newborn_rate", self.missing_newborn_rate)?;
        check_unit("clerical_noise.misclassified_newborn_rate", self.misclassified_newborn_rate)?;
        check_unit("clerical_noise.unclassifiable_newborn_rate", self.unclassifiable_newborn_rate)?;
        if !(self.time_jitter_sd >= 0.0 && self.time_jitter_sd.is_finite()) {
            return Err(Error::config("clerical_noise.time_jitter_sd", "must be finite and >= 0"));
        }
        if self.swap_window_minutes < 0 {
            return Err(Error::config("clerical_noise.swap_window_minutes", "must be >= 0"));
        }
        Ok(())
    }
}

fn check_unit(field: &'static str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{x} is outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_hospitals: usize,
    pub n_mothers: usize,
    pub preterm_prevalence: f64,
    pub vocab_size: usize,
    pub n_risk_codes: usize,
    /// Odds multiplier for drawing a risk code at a preterm mother's visit.
    pub risk_lift: f64,
    /// Per-code-slot probability of a risk code for a full-term mother.
    pub base_risk_rate: f64,
    /// Poisson mean of pre-delivery visits.
    pub visits_per_mother: f64,
    /// Mean number of codes per visit (at least one).
    pub codes_per_visit: f64,
    pub history_span_days: i64,
    /// Deliveries fall uniformly in this many days after the history span.
    pub delivery_window_days: i64,
    /// Mothers with clean delivery codes and no newborn record.
    pub clean_only_fraction: f64,
    /// Mothers with clean delivery codes and a newborn record.
    pub overlap_fraction: f64,
    pub twin_rate: f64,
    pub clerical_noise: ClericalNoiseModel,
    pub prediction_period_days: i64,
    pub min_visits: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_hospitals: 8,
            n_mothers: 4400,
            preterm_prevalence: 0.3,
            vocab_size: 200,
            n_risk_codes: 20,
            risk_lift: 4.0,
            base_risk_rate: 0.1,
            visits_per_mother: 6.0,
            codes_per_visit: 3.0,
            history_span_days: 540,
            delivery_window_days: 365,
            clean_only_fraction: 0.45,
            overlap_fraction: 0.10,
            twin_rate: 0.03,
            clerical_noise: ClericalNoiseModel::default(),
            prediction_period_days: 90,
            min_visits: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_hospitals", self.n_hospitals),
            ("n_mothers", self.n_mothers),
            ("vocab_size", self.vocab_size),
            ("n_risk_codes", self.n_risk_codes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.preterm_prevalence > 0.0 && self.preterm_prevalence < 1.0) {
            return Err(Error::config(
                "preterm_prevalence",
                format!("{} is outside (0, 1)", self.preterm_prevalence),
            ));
        }
        if self.vocab_size < n_special_codes() + self.n_risk_codes + 1 {
            return Err(Error::config(
                "vocab_size",
                format!("needs at least {} codes", n_special_codes() + self.n_risk_codes + 1),
            ));
        }
        if !(self.risk_lift >= 1.0 && self.risk_lift.is_finite()) {
            return Err(Error::config("risk_lift", "must be finite and >= 1"));
        }
        if !(self.base_risk_rate > 0.0 && self.base_risk_rate < 1.0) {
            return Err(Error::config("base_risk_rate", "must be inside (0, 1)"));
        }
        if !(self.visits_per_mother > 0.0 && self.visits_per_mother.is_finite()) {
            return Err(Error::config("visits_per_mother", "must be positive"));
        }
        if !(self.codes_per_visit >= 1.0 && self.codes_per_visit.is_finite()) {
            return Err(Error::config("codes_per_visit", "must be >= 1"));
        }
        if self.history_span_days <= 0 {
            return Err(Error::config("history_span_days", "must be positive"));
        }
        if self.delivery_window_days <= 0 {
            return Err(Error::config("delivery_window_days", "must be positive"));
        }
        check_unit("clean_only_fraction", self.clean_only_fraction)?;
        check_unit("overlap_fraction", self.overlap_fraction)?;
        if self.clean_only_fraction + self.overlap_fraction > 1.0 {
            return Err(Error::config("overlap_fraction", "clean_only_fraction + overlap_fraction exceeds 1"));
        }
        check_unit("twin_rate", self.twin_rate)?;
        if self.prediction_period_days < 0 {
            return Err(Error::config("prediction_period_days", "must be >= 0"));
        }
        self.clerical_noise.validate()
    }
}

/// Code index lists by role, resolved against the cohort vocabulary.
#[derive(Debug, Clone)]
pub struct CodeCatalog {
    pub fullterm_delivery: Vec<u32>,
    pub preterm_delivery: Vec<u32>,
    pub ambiguous_delivery: Vec<u32>,
    pub preterm_newborn: Vec<u32>,
    pub fullterm_newborn: Vec<u32>,
    pub liveborn: u32,
    pub unspecified_weeks: u32,
    pub risk: Vec<u32>,
    pub background: Vec<u32>,
}

/// Vocabulary of `vocab_size` codes: the delivery and newborn codes used by
/// the cohort rules, then synthetic ICD-9-formatted background codes
/// (`001.0`, `001.1`, ...), the first `n_risk` of which are risk codes.
pub fn build_vocabulary(vocab_size: usize, n_risk: usize) -> Result<(CodeVocabulary, CodeCatalog)> {
    let mut codes: Vec<String> = Vec::with_capacity(vocab_size);
    let mut take = |list: &[&str]| -> Vec<u32> {
        list.iter()
            .map(|c| {
                codes.push(c.to_string());
                (codes.len() - 1) as u32
            })
            .collect()
    };
    let fullterm_delivery = take(FULLTERM_DELIVERY);
    let preterm_delivery = take(PRETERM_DELIVERY);
    let ambiguous_delivery = take(AMBIGUOUS_DELIVERY);
    let preterm_newborn = take(PRETERM_NEWBORN);
    let fullterm_newborn = take(FULLTERM_NEWBORN);
    let other = take(OTHER_NEWBORN);
    if vocab_size < codes.len() + n_risk + 1 {
        return Err(Error::config("vocab_size", "too small for the cohort code lists"));
    }
    let first_bg = codes.len();
    for i in 0..(vocab_size - first_bg) {
        codes.push(format!("{:03}.{}", 1 + i / 10, i % 10));
    }
    let bg: Vec<u32> = (first_bg as u32..vocab_size as u32).collect();
    let catalog = CodeCatalog {
        fullterm_delivery,
        preterm_delivery,
        ambiguous_delivery,
        preterm_newborn,
        fullterm_newborn,
        liveborn: other[0],
        unspecified_weeks: other[2],
        risk: bg[..n_risk].to_vec(),
        background: bg[n_risk..].to_vec(),
    };
    Ok((CodeVocabulary::new(codes)?, catalog))
}

/// True links and labels, available only for synthetic cohorts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    /// newborn id to mother id
    pub links: BTreeMap<String, String>,
    /// mother id to true delivery label
    pub labels: BTreeMap<String, Label>,
}

impl GroundTruth {
    /// One line per newborn (`newborn_id`, `mother_id`, `true_label`), then one
    /// line per mother without a newborn record with `-` as newborn id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut has_baby = BTreeSet::new();
        for (nb, m) in &self.links {
            has_baby.insert(m.as_str());
            out.push_str(&format!("{nb}\t{m}\t{}\n", self.labels[m].as_str()));
        }
        for (m, l) in &self.labels {
            if !has_baby.contains(m.as_str()) {
                out.push_str(&format!("-\t{m}\t{}\n", l.as_str()));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut truth = GroundTruth::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split('\t').collect();
            let [nb, m, l] = f.as_slice() else {
                return Err(err("expected newborn_id<TAB>mother_id<TAB>true_label".into()));
            };
            let label: Label = l.parse().map_err(err)?;
            truth.labels.insert(m.to_string(), label);
            if *nb != "-" {
                truth.links.insert(nb.to_string(), m.to_string());
            }
        }
        Ok(truth)
    }
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub vocab: CodeVocabulary,
    pub mothers: Vec<PatientRecord>,
    pub newborns: Vec<PatientRecord>,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Segment {
    CleanOnly,
    Overlap,
    NoisyOnly,
}

struct HospitalOutput {
    mothers: Vec<PatientRecord>,
    newborns: Vec<PatientRecord>,
    links: Vec<(String, String)>,
    labels: Vec<(String, Label)>,
}

/// Generates a cohort. Each hospital draws from its own stream derived from
/// `(seed, hospital index)`, so output is identical however hospitals are
/// scheduled.
pub fn generate_cohort(config: &SynthConfig) -> Result<Cohort> {
    config.validate()?;
    let (vocab, catalog) = build_vocabulary(config.vocab_size, config.n_risk_codes)?;
    let per = config.n_mothers / config.n_hospitals;
    let extra = config.n_mothers % config.n_hospitals;
    let outputs = par::map_range(config.n_hospitals, |h| {
        let n = per + usize::from(h < extra);
        generate_hospital(config, &catalog, h, n)
    });
    let mut cohort = Cohort {
        vocab,
        mothers: Vec::with_capacity(config.n_mothers),
        newborns: Vec::new(),
        truth: GroundTruth::default(),
    };
    for out in outputs {
        cohort.mothers.extend(out.mothers);
        cohort.newborns.extend(out.newborns);
        cohort.truth.links.extend(out.links);
        cohort.truth.labels.extend(out.labels);
    }
    Ok(cohort)
}

fn generate_hospital(config: &SynthConfig, cat: &CodeCatalog, h: usize, n_mothers: usize) -> HospitalOutput {
    let mut rng = rng::stream(config.seed, &[rng::tag("hospital"), h as u64]);
    let hospital_id = format!("H{h:02}");
    let noise = &config.clerical_noise;
    let visit_count = Poisson::new(config.visits_per_mother).expect("validated");
    let extra_codes = (config.codes_per_visit > 1.0).then(|| Poisson::new(config.codes_per_visit - 1.0).expect("validated"));
    let jitter = Normal::new(0.0, noise.time_jitter_sd).expect("validated");

    let q_full = config.base_risk_rate;
    let odds = q_full / (1.0 - q_full) * config.risk_lift;
    let q_pre = odds / (1.0 + odds);

    let mut mothers = Vec::with_capacity(n_mothers);
    let mut babies: Vec<(PatientRecord, String)> = Vec::new();
    let mut labels = Vec::with_capacity(n_mothers);

    for k in 0..n_mothers {
        let mother_id = format!("{hospital_id}-M{k:05}");
        let label = if rng.random::<f64>() < config.preterm_prevalence {
            Label::Preterm
        } else {
            Label::FullTerm
        };
        let u: f64 = rng.random();
        let segment = if u < config.clean_only_fraction {
            Segment::CleanOnly
        } else if u < config.clean_only_fraction + config.overlap_fraction {
            Segment::Overlap
        } else {
            Segment::NoisyOnly
        };

        // delivery encounter
        let delivery_day = config.history_span_days + rng.random_range(0..config.delivery_window_days);
        let d_adm = delivery_day * MINUTES_PER_DAY + rng.random_range(0..MINUTES_PER_DAY);
        let d_dis = d_adm + rng.random_range(MINUTES_PER_DAY..=4 * MINUTES_PER_DAY);
        let mut d_codes = BTreeSet::new();
        if segment == Segment::NoisyOnly {
            d_codes.insert(*pick(&mut rng, &cat.ambiguous_delivery));
            if rng.random_bool(0.3) {
                d_codes.insert(*pick(&mut rng, &cat.ambiguous_delivery));
            }
        } else {
            let list = match label {
                Label::Preterm => &cat.preterm_delivery,
                Label::FullTerm => &cat.fullterm_delivery,
            };
            d_codes.insert(*pick(&mut rng, list));
            if rng.random_bool(0.5) {
                d_codes.insert(*pick(&mut rng, &cat.ambiguous_delivery));
            }
        }
        let mut visits = vec![Visit::new(d_codes, d_adm, d_dis)];

        // pre-delivery history
        let q = if label == Label::Preterm { q_pre } else { q_full };
        let n_visits = visit_count.sample(&mut rng) as usize;
        for _ in 0..n_visits {
            let day = delivery_day - 1 - rng.random_range(0..config.history_span_days);
            let adm = day * MINUTES_PER_DAY + rng.random_range(360..1200);
            let dis = adm + rng.random_range(15..=240);
            let n_codes = 1 + extra_codes.map_or(0, |p| p.sample(&mut rng) as usize);
            let codes: BTreeSet<u32> = (0..n_codes)
                .map(|_| {
                    if rng.random::<f64>() < q {
                        *pick(&mut rng, &cat.risk)
                    } else {
                        *pick(&mut rng, &cat.background)
                    }
                })
                .collect();
            visits.push(Visit::new(codes, adm, dis));
        }
        let mother = merge_same_day(&PatientRecord {
            patient_id: mother_id.clone(),
            hospital_id: hospital_id.clone(),
            role: Role::Mother,
            visits,
            delivery_day: Some(delivery_day),
        });
        mothers.push(mother);
        labels.push((mother_id.clone(), label));

        // newborns
        if segment == Segment::CleanOnly || rng.random::<f64>() < noise.missing_newborn_rate {
            continue;
        }
        let n_babies = if rng.random::<f64>() < config.twin_rate { 2 } else { 1 };
        for _ in 0..n_babies {
            let coded = if rng.random::<f64>() < noise.misclassified_newborn_rate {
                label.flipped()
            } else {
                label
            };
            let mut codes: BTreeSet<u32> = [cat.liveborn].into_iter().collect();
            if rng.random::<f64>() < noise.unclassifiable_newborn_rate {
                codes.insert(cat.unspecified_weeks);
            } else {
                codes.insert(match coded {
                    Label::Preterm => *pick(&mut rng, &cat.preterm_newborn),
                    Label::FullTerm => *pick(&mut rng, &cat.fullterm_newborn),
                });
            }
            let half = noise.swap_window_minutes / 2;
            let shift = if half > 0 { rng.random_range(-half..=half) } else { 0 };
            let adm = d_adm + shift + jitter.sample(&mut rng).round() as i64;
            let dis = (d_dis + shift + jitter.sample(&mut rng).round() as i64).max(adm);
            let visit = Visit::new(codes, adm, dis);
            babies.push((
                PatientRecord {
                    patient_id: String::new(),
                    hospital_id: hospital_id.clone(),
                    role: Role::Newborn,
                    delivery_day: Some(visit.day),
                    visits: vec![visit],
                },
                mother_id.clone(),
            ));
        }
    }

    // newborn ids carry no trace of their mother
    babies.shuffle(&mut rng);
    let mut links = Vec::with_capacity(babies.len());
    let newborns = babies
        .into_iter()
        .enumerate()
        .map(|(i, (mut nb, mother_id))| {
            nb.patient_id = format!("{hospital_id}-N{i:05}");
            links.push((nb.patient_id.clone(), mother_id));
            nb
        })
        .collect();
    HospitalOutput {
        mothers,
        newborns,
        links,
        labels,
    }
}

fn pick<'a, T>(rng: &mut rng::Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

/// The three example sets assembled from a cohort and heuristic links.
#[derive(Debug, Clone, Default)]
pub struct Datasets {
    /// Mothers with a clean label (also carrying a noisy label when linked).
    pub d_star: Vec<LabeledExample>,
    /// Linked mothers with a noisy label (also carrying a clean label when known).
    pub d_tilde: Vec<LabeledExample>,
    /// Mothers with both labels.
    pub d_prime: Vec<LabeledExample>,
}

/// Builds the clean, noisy and overlap sets. Records are truncated at the
/// prediction point and filtered by visit count before assembly.
pub fn build_datasets(
    mothers: &[PatientRecord],
    newborns: &[PatientRecord],
    links: &LinkSet,
    vocab: &CodeVocabulary,
    config: &SynthConfig,
) -> Result<Datasets> {
    let noisy = derive_noisy_labels(links, newborns, vocab)?;
    let mut examples = Vec::with_capacity(mothers.len());
    for m in mothers {
        let record = merge_same_day(m);
        let delivery = record
            .delivery_visit()
            .ok_or_else(|| Error::MissingDelivery(record.patient_id.clone()))?;
        let clean = classify_delivery(vocab.codes_of(&delivery.codes)?).label();
        let noisy_label = noisy.get(&record.patient_id).copied();
        if clean.is_none() && noisy_label.is_none() {
            continue;
        }
        examples.push(LabeledExample {
            record: truncate_at_prediction_point(&record, config.prediction_period_days)?,
            clean_label: clean,
            noisy_label,
        });
    }
    let examples = apply_min_visit_filter(examples, config.min_visits);
    let d = Datasets {
        d_star: examples.iter().filter(|e| e.is_clean()).cloned().collect(),
        d_tilde: examples.iter().filter(|e| e.is_noisy()).cloned().collect(),
        d_prime: examples.iter().filter(|e| e.is_overlap()).cloned().collect(),
    };
    if d.d_prime.is_empty() {
        return Err(Error::EmptyDataset(
            "no mother carries both a clean and a noisy label; the corruption matrix is unestimable".into(),
        ));
    }
    Ok(d)
}

/// Per-class counts for cohort summaries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CohortSummary {
    pub mothers: usize,
    pub preterm_mothers: usize,
    pub newborns: usize,
    pub linked_newborns: usize,
}

impl Cohort {
    pub fn summary(&self) -> CohortSummary {
        CohortSummary {
            mothers: self.mothers.len(),
            preterm_mothers: self.truth.labels.values().filter(|&&l| l == Label::Preterm).count(),
            newborns: self.newborns.len(),
            linked_newborns: self.truth.links.len(),
        }
    }
}
