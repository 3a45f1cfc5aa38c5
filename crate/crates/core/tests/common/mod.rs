//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use alc_core::datamodel::{Label, PatientRecord, Role, Visit};
use alc_core::linkage::{LinkSet, MatchCandidate};
use alc_core::net::{backward, batch_loss, init_params, Batch, Dims, LossKind, ModelParams};
use alc_core::noise::CorruptionMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// AUC by enumerating every positive/negative pair.
pub fn auc_pairs(scores: &[f64], labels: &[Label]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != Label::Preterm {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != Label::FullTerm {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                credit += 1.0;
            } else if scores[i] == scores[j] {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Average precision by evaluating precision and recall at every distinct
/// score used as a threshold (`score >= t`), from the highest down.
pub fn pr_auc_thresholds(scores: &[f64], labels: &[Label]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l == Label::Preterm).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let mut tp = 0usize;
        let mut predicted = 0usize;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                predicted += 1;
                if *l == Label::Preterm {
                    tp += 1;
                }
            }
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / predicted as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

/// Linkage by exhaustive search: every newborn is compared against every
/// mother of its hospital, then the threshold and capacity rules apply.
pub fn link_oracle(mothers: &[(String, String, i64, i64)], newborns: &[(String, String, i64, i64)], cap: usize, max_l1: i64) -> Vec<(String, String, i64)> {
    let mut per_mother: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for (nb, h, a, d) in newborns {
        let mut best: Option<(i64, &str)> = None;
        for (m, mh, ma, md) in mothers {
            if mh != h {
                continue;
            }
            let dist = (a - ma).abs() + (d - md).abs();
            let cand = (dist, m.as_str());
            if best.is_none_or(|b| cand < b) {
                best = Some(cand);
            }
        }
        if let Some((dist, m)) = best {
            if dist <= max_l1 {
                per_mother.entry(m).or_default().push((dist, nb.as_str()));
            }
        }
    }
    let mut out = Vec::new();
    for (m, mut babies) in per_mother {
        babies.sort();
        for (dist, nb) in babies.into_iter().take(cap) {
            out.push((nb.to_string(), m.to_string(), dist));
        }
    }
    out.sort();
    out
}

pub fn link_tuples(links: &LinkSet) -> Vec<(String, String, i64)> {
    links
        .links
        .iter()
        .map(|MatchCandidate { newborn_id, mother_id, l1_minutes }| (newborn_id.clone(), mother_id.clone(), *l1_minutes))
        .collect()
}

pub fn timed_record(id: &str, hospital: &str, role: Role, adm: i64, dis: i64) -> PatientRecord {
    let v = Visit::new(BTreeSet::from([0]), adm, dis);
    PatientRecord {
        patient_id: id.into(),
        hospital_id: hospital.into(),
        role,
        delivery_day: Some(v.day),
        visits: vec![v],
    }
}

/// A random small linkage instance. Times are drawn from a narrow range so
/// that equal distances and threshold boundaries occur often.
pub struct LinkInstance {
    pub mothers: Vec<(String, String, i64, i64)>,
    pub newborns: Vec<(String, String, i64, i64)>,
    pub cap: usize,
    pub max_l1: i64,
}

impl LinkInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let n_h = rng.random_range(1..=3);
        let mut mothers = Vec::new();
        let mut newborns = Vec::new();
        let spread = *[30i64, 300, 3000].get(rng.random_range(0..3)).unwrap();
        for h in 0..n_h {
            let hid = format!("H{h}");
            for i in 0..rng.random_range(0..=8) {
                let a = rng.random_range(0..spread);
                mothers.push((format!("{hid}-M{i}"), hid.clone(), a, a + rng.random_range(0..spread)));
            }
            for i in 0..rng.random_range(0..=6) {
                let a = rng.random_range(0..spread);
                newborns.push((format!("{hid}-N{i}"), hid.clone(), a, a + rng.random_range(0..spread)));
            }
        }
        LinkInstance {
            mothers,
            newborns,
            cap: rng.random_range(1..=3),
            max_l1: rng.random_range(0..2 * spread),
        }
    }

    pub fn records(&self) -> (Vec<PatientRecord>, Vec<PatientRecord>) {
        let m = self.mothers.iter().map(|(id, h, a, d)| timed_record(id, h, Role::Mother, *a, *d)).collect();
        let n = self.newborns.iter().map(|(id, h, a, d)| timed_record(id, h, Role::Newborn, *a, *d)).collect();
        (m, n)
    }
}

/// Worst relative error between reverse-mode and central-difference
/// gradients over every parameter. Pairs whose magnitudes are both below
/// `floor` are compared on absolute error against `floor` instead.
pub fn max_gradient_error(batch: &Batch, params: &ModelParams, kind: &LossKind, h: f64, floor: f64) -> (f64, String) {
    let (_, grads) = backward(batch, params, kind).unwrap();
    let mut worst = (0.0, String::new());
    let n_tensors = ModelParams::TENSOR_NAMES.len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].1.data.len();
        for k in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t].1.data[k] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t].1.data[k] -= h;
            let numeric = (batch_loss(batch, &plus, kind).unwrap() - batch_loss(batch, &minus, kind).unwrap()) / (2.0 * h);
            let analytic = grads.tensors()[t].1.data[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{}[{k}] analytic {analytic:e} numeric {numeric:e}", ModelParams::TENSOR_NAMES[t]));
            }
        }
    }
    worst
}

/// A random small model and batch: vocabulary 20, 8-dimensional embedding
/// and hidden state, up to 5 visits and up to 4 examples of varying length.
/// Biases are randomized so every tensor is exercised.
pub fn random_gradient_case(seed: u64) -> (Batch, ModelParams, CorruptionMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(20, 8, 8).unwrap();
    let mut params = init_params(dims, seed);
    for (_, m) in params.tensors_mut() {
        for x in m.data.iter_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let n = rng.random_range(1..=4);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let t = rng.random_range(1..=5);
        let seq: Vec<Vec<u32>> = (0..t)
            .map(|_| {
                let k = rng.random_range(1..=4);
                let set: BTreeSet<u32> = (0..k).map(|_| rng.random_range(0..20)).collect();
                set.into_iter().collect()
            })
            .collect();
        seqs.push(seq);
        labels.push(if rng.random_bool(0.5) { Label::Preterm } else { Label::FullTerm });
    }
    let a = rng.random_range(0.55..0.95);
    let b = rng.random_range(0.55..0.95);
    let c = CorruptionMatrix::new([[a, 1.0 - a], [1.0 - b, b]]).unwrap();
    (Batch::new(seqs, labels), params, c)
}
