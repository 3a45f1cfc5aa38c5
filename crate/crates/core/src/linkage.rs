//! Mother-newborn record linkage from admission/discharge times.
//!
//! Each newborn is assigned the nearest mother in the same hospital by L1
//! distance between `[t_adm, t_dis]` vectors. Links longer than the distance
//! threshold are dropped, then mothers holding more than the capacity keep
//! only their nearest newborns. Ties always go to the lexicographically
//! smaller id, so the result does not depend on input order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::datamodel::{classify_newborn, CodeVocabulary, Label, NewbornClass, PatientRecord, Role};
use crate::error::{Error, Result};
use crate::par;
use crate::synth::GroundTruth;

/// Up to triplets per mother.
pub const DEFAULT_MAX_PER_MOTHER: usize = 3;
/// 24 hours.
pub const DEFAULT_MAX_L1_MINUTES: i64 = 1440;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatchCandidate {
    pub newborn_id: String,
    pub mother_id: String,
    pub l1_minutes: i64,
}

/// Accepted links, sorted by newborn id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkSet {
    pub links: Vec<MatchCandidate>,
}

impl LinkSet {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for l in &self.links {
            out.push_str(&format!("{}\t{}\t{}\n", l.newborn_id, l.mother_id, l.l1_minutes));
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
        let mut links = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let l1 = match f.as_slice() {
                [_, _, d] => d.parse::<i64>().ok(),
                _ => None,
            };
            let Some(l1_minutes) = l1 else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "expected newborn_id<TAB>mother_id<TAB>l1_minutes".into(),
                });
            };
            links.push(MatchCandidate {
                newborn_id: f[0].to_string(),
                mother_id: f[1].to_string(),
                l1_minutes,
            });
        }
        links.sort();
        Ok(LinkSet { links })
    }
}

/// `[t_adm, t_dis]` of the delivery encounter (mothers) or the birth
/// encounter (newborns).
pub fn time_vector(record: &PatientRecord) -> Result<(i64, i64)> {
    let visit = match record.role {
        Role::Mother => record.delivery_visit(),
        Role::Newborn => record.delivery_visit().or_else(|| record.visits.first()),
    };
    visit
        .map(|v| (v.t_adm, v.t_dis))
        .ok_or_else(|| Error::MissingDelivery(record.patient_id.clone()))
}

/// L1 distance in minutes between two records' time vectors.
pub fn time_distance(a: &PatientRecord, b: &PatientRecord) -> Result<i64> {
    let (a_adm, a_dis) = time_vector(a)?;
    let (b_adm, b_dis) = time_vector(b)?;
    Ok((a_adm - b_adm).abs() + (a_dis - b_dis).abs())
}

/// Newborns whose birth codes give a preterm or full-term class.
pub fn classifiable_newborns(newborns: &[PatientRecord], vocab: &CodeVocabulary) -> Result<Vec<PatientRecord>> {
    let mut out = Vec::new();
    for nb in newborns {
        if newborn_class(nb, vocab)? != NewbornClass::Unknown {
            out.push(nb.clone());
        }
    }
    Ok(out)
}

fn newborn_class(nb: &PatientRecord, vocab: &CodeVocabulary) -> Result<NewbornClass> {
    let codes = nb.all_codes();
    Ok(classify_newborn(vocab.codes_of(&codes)?))
}

struct Timed<'a> {
    id: &'a str,
    adm: i64,
    dis: i64,
}

/// Runs the three matching stages per hospital. Mothers without a delivery
/// encounter and newborns without a birth visit are ignored.
pub fn match_newborns(
    mothers: &[PatientRecord],
    newborns: &[PatientRecord],
    max_per_mother: usize,
    max_l1_minutes: i64,
) -> LinkSet {
    let mut by_hospital: BTreeMap<&str, (Vec<Timed>, Vec<Timed>)> = BTreeMap::new();
    for m in mothers {
        if let Ok((adm, dis)) = time_vector(m) {
            by_hospital.entry(&m.hospital_id).or_default().0.push(Timed {
                id: &m.patient_id,
                adm,
                dis,
            });
        }
    }
    for b in newborns {
        if let Ok((adm, dis)) = time_vector(b) {
            by_hospital.entry(&b.hospital_id).or_default().1.push(Timed {
                id: &b.patient_id,
                adm,
                dis,
            });
        }
    }
    let groups: Vec<_> = by_hospital.into_values().collect();
    let per_hospital = par::map(&groups, |(ms, bs)| match_hospital(ms, bs, max_per_mother, max_l1_minutes));
    let mut links: Vec<MatchCandidate> = per_hospital.into_iter().flatten().collect();
    links.sort();
    LinkSet { links }
}

fn match_hospital(mothers: &[Timed], newborns: &[Timed], cap: usize, max_l1: i64) -> Vec<MatchCandidate> {
    let mut sorted: Vec<&Timed> = mothers.iter().collect();
    sorted.sort_by(|a, b| (a.adm, a.id).cmp(&(b.adm, b.id)));

    // stage 1 + 2: nearest mother, then distance threshold
    let mut assigned: HashMap<&str, Vec<(i64, &str)>> = HashMap::new();
    for b in newborns {
        let Some((d, m)) = nearest(&sorted, b) else { continue };
        if d <= max_l1 {
            assigned.entry(m).or_default().push((d, b.id));
        }
    }

    // stage 3: capacity, excess newborns stay unmatched
    let mut out = Vec::new();
    for (mother, mut babies) in assigned {
        babies.sort();
        babies.truncate(cap);
        out.extend(babies.into_iter().map(|(d, nb)| MatchCandidate {
            newborn_id: nb.to_string(),
            mother_id: mother.to_string(),
            l1_minutes: d,
        }));
    }
    out
}

/// Bounded scan outward from the newborn's admission time. Since the L1
/// distance is at least the admission gap, the scan stops once that gap
/// exceeds the best distance found.
fn nearest<'a>(sorted: &[&'a Timed], b: &Timed) -> Option<(i64, &'a str)> {
    let start = sorted.partition_point(|m| m.adm < b.adm);
    let mut best: Option<(i64, &str)> = None;
    let consider = |m: &'a Timed, best: &mut Option<(i64, &'a str)>| {
        let d = (m.adm - b.adm).abs() + (m.dis - b.dis).abs();
        if best.is_none_or(|cur| (d, m.id) < cur) {
            *best = Some((d, m.id));
        }
    };
    for m in &sorted[start..] {
        if best.is_some_and(|(d, _)| m.adm - b.adm > d) {
            break;
        }
        consider(m, &mut best);
    }
    for m in sorted[..start].iter().rev() {
        if best.is_some_and(|(d, _)| b.adm - m.adm > d) {
            break;
        }
        consider(m, &mut best);
    }
    best
}

/// Noisy delivery label of each linked mother, from her linked newborns'
/// birth codes. A mother with several babies is preterm if any baby is.
pub fn derive_noisy_labels(
    links: &LinkSet,
    newborns: &[PatientRecord],
    vocab: &CodeVocabulary,
) -> Result<BTreeMap<String, Label>> {
    let by_id: HashMap<&str, &PatientRecord> = newborns.iter().map(|n| (n.patient_id.as_str(), n)).collect();
    let mut out: BTreeMap<String, Label> = BTreeMap::new();
    for link in &links.links {
        let nb = by_id
            .get(link.newborn_id.as_str())
            .ok_or_else(|| Error::UnclassifiableNewborn(link.newborn_id.clone()))?;
        let label = newborn_class(nb, vocab)?
            .label()
            .ok_or_else(|| Error::UnclassifiableNewborn(link.newborn_id.clone()))?;
        out.entry(link.mother_id.clone())
            .and_modify(|l| {
                if label == Label::Preterm {
                    *l = Label::Preterm
                }
            })
            .or_insert(label);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAccuracy {
    /// Correctly linked newborns over linked newborns.
    pub pair_accuracy: f64,
    /// Matched mothers whose derived label equals the true label, over matched mothers.
    pub label_accuracy: f64,
    pub n_links: usize,
    pub n_mothers: usize,
}

pub fn link_accuracy(
    links: &LinkSet,
    newborns: &[PatientRecord],
    vocab: &CodeVocabulary,
    truth: &GroundTruth,
) -> Result<LinkAccuracy> {
    if links.is_empty() {
        return Err(Error::EmptyDataset("link set".into()));
    }
    let correct = links
        .links
        .iter()
        .filter(|l| truth.links.get(&l.newborn_id) == Some(&l.mother_id))
        .count();
    let noisy = derive_noisy_labels(links, newborns, vocab)?;
    let agree = noisy
        .iter()
        .filter(|(m, l)| truth.labels.get(*m) == Some(*l))
        .count();
    Ok(LinkAccuracy {
        pair_accuracy: correct as f64 / links.len() as f64,
        label_accuracy: agree as f64 / noisy.len() as f64,
        n_links: links.len(),
        n_mothers: noisy.len(),
    })
}
