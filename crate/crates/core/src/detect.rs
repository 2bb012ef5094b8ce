//! OOD detectors and evaluation over held-out domains.
//!
//! Every score is oriented so that larger means more in-distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::datagen::{TestView, TrainView, Y_IND};
use crate::gda::{GdaError, GdaModel, Shrinkage};
use crate::gmodel::argmax_rows;
use crate::numcore::{logsumexp, ops, NumError, Tensor};
use crate::training::Predictor;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Gda(#[from] GdaError),
    #[error("auroc needs scores on both sides, got {ind} InD and {ood} OOD")]
    EmptySide { ind: usize, ood: usize },
    #[error("non-finite score")]
    NonFinite,
    #[error("detector {0} needs a fitted feature GDA")]
    Unfitted(Detector),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Detector {
    Msp,
    Energy,
    Ddu,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::Msp, Detector::Energy, Detector::Ddu];

    pub fn name(self) -> &'static str {
        match self {
            Self::Msp => "msp",
            Self::Energy => "energy",
            Self::Ddu => "ddu",
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown detector {s:?}"))
    }
}

/// Largest softmax probability.
pub fn msp_score(logits: &[f64]) -> f64 {
    let mut p = vec![0.0; logits.len()];
    ops::softmax_into(logits, 1.0, &mut p);
    p.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Negative energy, `T log sum_k exp(l_k / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64, NumError> {
    logsumexp(logits, temperature)
}

/// Log of the class-marginal feature density.
pub fn ddu_score(feature: &[f64], gda: &GdaModel) -> Result<f64, GdaError> {
    gda.marginal_log_density(feature)
}

/// Probability that a random (InD, OOD) pair is ordered correctly, ties
/// counting one half. Mann-Whitney rank sum with mid-ranks.
pub fn auroc(ind: &[f64], ood: &[f64]) -> Result<f64, DetectError> {
    if ind.is_empty() || ood.is_empty() {
        return Err(DetectError::EmptySide { ind: ind.len(), ood: ood.len() });
    }
    if ind.iter().chain(ood).any(|v| !v.is_finite()) {
        return Err(DetectError::NonFinite);
    }
    let mut all: Vec<(f64, bool)> = ind.iter().map(|&v| (v, true)).chain(ood.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // ranks doubled so that mid-ranks stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank_sum2 += mid2 * all[i..=j].iter().filter(|e| e.1).count() as u64;
        i = j + 1;
    }
    let (n1, n0) = (ind.len() as u64, ood.len() as u64);
    let u2 = rank_sum2 - n1 * (n1 + 1);
    Ok(u2 as f64 / (2 * n1 * n0) as f64)
}

/// Feature-space GDA over `g(x)` of the training view.
pub fn fit_feature_gda(pred: &Predictor, view: &TrainView, shrinkage: Shrinkage) -> Result<GdaModel, DetectError> {
    let f = pred.features(&view.x)?;
    Ok(GdaModel::fit(&f, &view.labels, view.n_classes(), shrinkage)?)
}

/// Scores of one detector for every row of `x`.
pub fn scores(
    pred: &Predictor,
    feature_gda: Option<&GdaModel>,
    x: &Tensor,
    detector: Detector,
    temperature: f64,
) -> Result<Vec<f64>, DetectError> {
    let f = pred.features(x)?;
    let logits = pred.logits_from_features(&f)?;
    score_rows(&f, &logits, feature_gda, detector, temperature)
}

fn score_rows(
    f: &Tensor,
    logits: &Tensor,
    feature_gda: Option<&GdaModel>,
    detector: Detector,
    temperature: f64,
) -> Result<Vec<f64>, DetectError> {
    (0..logits.rows())
        .map(|i| match detector {
            Detector::Msp => Ok(msp_score(logits.row(i))),
            Detector::Energy => Ok(energy_score(logits.row(i), temperature)?),
            Detector::Ddu => {
                let gda = feature_gda.ok_or(DetectError::Unfitted(detector))?;
                Ok(ddu_score(f.row(i), gda)?)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainResult {
    pub domain: u32,
    /// `None` when the domain lacks InD or OOD instances.
    pub auroc: BTreeMap<Detector, Option<f64>>,
    /// `None` when the domain has no InD instances.
    pub ind_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub domains: Vec<DomainResult>,
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl Evaluation {
    /// Arithmetic mean over the domains where the cell is defined.
    pub fn mean_auroc(&self, d: Detector) -> Option<f64> {
        mean_defined(self.domains.iter().map(|r| r.auroc.get(&d).copied().flatten()))
    }

    pub fn mean_accuracy(&self) -> Option<f64> {
        mean_defined(self.domains.iter().map(|r| r.ind_accuracy))
    }

    pub fn detectors(&self) -> Vec<Detector> {
        self.domains.first().map(|r| r.auroc.keys().copied().collect()).unwrap_or_default()
    }

    /// One row per (domain, detector), then one `avg` row per detector.
    pub fn rows(&self, benchmark: &str, seed: u64, ood_class: &str) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for r in &self.domains {
            for (&d, &a) in &r.auroc {
                out.push(ResultRow {
                    benchmark: benchmark.into(),
                    seed,
                    ood_class: ood_class.into(),
                    test_domain: r.domain.to_string(),
                    detector: d,
                    auroc: a,
                    ind_accuracy: r.ind_accuracy,
                });
            }
        }
        for d in self.detectors() {
            out.push(ResultRow {
                benchmark: benchmark.into(),
                seed,
                ood_class: ood_class.into(),
                test_domain: "avg".into(),
                detector: d,
                auroc: self.mean_auroc(d),
                ind_accuracy: self.mean_accuracy(),
            });
        }
        out
    }
}

/// Scores every test domain with each detector and measures InD accuracy
/// against the original class ids.
pub fn evaluate(
    pred: &Predictor,
    feature_gda: Option<&GdaModel>,
    test: &TestView,
    detectors: &[Detector],
    temperature: f64,
) -> Result<Evaluation, DetectError> {
    let f = pred.features(&test.x)?;
    let logits = pred.logits_from_features(&f)?;
    let predicted: Vec<u32> = argmax_rows(&logits).into_iter().map(|k| test.class_map[k]).collect();
    let mut all_scores = BTreeMap::new();
    for &d in detectors {
        all_scores.insert(d, score_rows(&f, &logits, feature_gda, d, temperature)?);
    }
    let mut domain_ids: Vec<u32> = test.domains.clone();
    domain_ids.sort_unstable();
    domain_ids.dedup();

    let mut domains = Vec::new();
    for e in domain_ids {
        let rows: Vec<usize> = (0..test.len()).filter(|&i| test.domains[i] == e).collect();
        let ind_rows: Vec<usize> = rows.iter().copied().filter(|&i| test.binary[i] == Y_IND).collect();
        let ind_accuracy = if ind_rows.is_empty() {
            None
        } else {
            let hits = ind_rows.iter().filter(|&&i| predicted[i] == test.original[i]).count();
            Some(hits as f64 / ind_rows.len() as f64)
        };
        let mut auroc_cells = BTreeMap::new();
        for (&d, s) in &all_scores {
            let ind: Vec<f64> = rows.iter().filter(|&&i| test.binary[i] == Y_IND).map(|&i| s[i]).collect();
            let ood: Vec<f64> = rows.iter().filter(|&&i| test.binary[i] != Y_IND).map(|&i| s[i]).collect();
            let cell = if ind.is_empty() || ood.is_empty() { None } else { Some(auroc(&ind, &ood)?) };
            auroc_cells.insert(d, cell);
        }
        domains.push(DomainResult { domain: e, auroc: auroc_cells, ind_accuracy });
    }
    Ok(Evaluation { domains })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub benchmark: String,
    pub seed: u64,
    pub ood_class: String,
    pub test_domain: String,
    pub detector: Detector,
    pub auroc: Option<f64>,
    pub ind_accuracy: Option<f64>,
}

pub const RESULT_HEADER: &str = "benchmark,seed,ood_class,test_domain,detector,auroc,ind_accuracy";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl ResultRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.benchmark,
            self.seed,
            self.ood_class,
            self.test_domain,
            self.detector,
            cell(self.auroc),
            cell(self.ind_accuracy)
        )
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::nn::{Linear, Mlp};
    use proptest::prelude::*;

    fn brute(ind: &[f64], ood: &[f64]) -> f64 {
        let mut c = 0.0;
        for &a in ind {
            for &b in ood {
                c += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        c / (ind.len() * ood.len()) as f64
    }

    #[test]
    fn score_examples() {
        assert!((msp_score(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let s = 1.0 / (1.0 + (-10f64).exp());
        assert!((msp_score(&[10.0, 0.0]) - s).abs() < 1e-15);
        assert!((energy_score(&[0.0, 0.0], 1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(energy_score(&[0.0], -1.0).is_err());
        assert!(energy_score(&[0.0, 0.1], 1.0).unwrap() > energy_score(&[0.0, 0.0], 1.0).unwrap());
    }

    #[test]
    fn ddu_single_standard_class() {
        let gda = GdaModel::from_parts(vec![(vec![0.0; 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 1e-300, 1.0)])
            .unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((ddu_score(&[0.0; 3], &gda).unwrap() - want).abs() < 1e-12);
        assert!(ddu_score(&[0.0; 3], &gda).unwrap() > ddu_score(&[5.0, 0.0, 0.0], &gda).unwrap());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 7]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(DetectError::EmptySide { .. })));
        assert!(auroc(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force_with_duplicates() {
        let mut r = crate::rng::stream(9, 0);
        use rand::Rng;
        let ind: Vec<f64> = (0..50).map(|_| r.random_range(0..20) as f64).collect();
        let ood: Vec<f64> = (0..50).map(|_| r.random_range(0..20) as f64).collect();
        assert_eq!(auroc(&ind, &ood).unwrap(), brute(&ind, &ood));
    }

    fn constant_predictor() -> Predictor {
        let g = Mlp::from_layers(vec![Linear::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])).unwrap()], true).unwrap();
        let h = Linear::new(Tensor::zeros(&[2, 3]), Tensor::vector(vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        Predictor::from_parts(g, h).unwrap()
    }

    fn view() -> TestView {
        TestView {
            x: Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0], [2.0, 2.0], [0.5, 0.5], [1.0, 1.0]]).unwrap(),
            original: vec![2, 2, 0, 1, 3],
            binary: vec![1, 1, 1, 0, 1],
            domains: vec![5, 5, 5, 5, 6],
            class_map: vec![0, 2, 3],
        }
    }

    #[test]
    fn constant_logits_score_majority_class() {
        let ev = evaluate(&constant_predictor(), None, &view(), &[Detector::Msp], 1.0).unwrap();
        // argmax is column 1, i.e. class 2
        assert_eq!(ev.domains[0].ind_accuracy, Some(2.0 / 3.0));
        assert_eq!(ev.domains[0].auroc[&Detector::Msp], Some(0.5));
        assert_eq!(ev.domains[1].auroc[&Detector::Msp], None);
        assert_eq!(ev.domains[1].ind_accuracy, Some(0.0));
        assert_eq!(ev.mean_accuracy(), Some(1.0 / 3.0));
        assert_eq!(ev.mean_auroc(Detector::Msp), Some(0.5));
        assert!(matches!(
            evaluate(&constant_predictor(), None, &view(), &[Detector::Ddu], 1.0),
            Err(DetectError::Unfitted(Detector::Ddu))
        ));
    }

    #[test]
    fn csv_marks_undefined_cells() {
        let ev = evaluate(&constant_predictor(), None, &view(), &[Detector::Energy], 1.0).unwrap();
        let csv = results_csv(&ev.rows("b", 1, "3"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RESULT_HEADER);
        assert!(lines.contains(&"b,1,3,6,energy,NA,0"));
        assert!(lines.last().unwrap().starts_with("b,1,3,avg,energy,0.5,"));
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_monotone_maps(
            ind in prop::collection::vec(-5.0f64..5.0, 1..40),
            ood in prop::collection::vec(-5.0f64..5.0, 1..40),
            a in 0.1f64..3.0,
            b in -2.0f64..2.0,
        ) {
            let f = |v: &f64| (a * v + b).exp() + v.powi(3);
            let ti: Vec<f64> = ind.iter().map(f).collect();
            let to: Vec<f64> = ood.iter().map(f).collect();
            prop_assert!((auroc(&ind, &ood).unwrap() - auroc(&ti, &to).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn swapped_roles_sum_to_one(
            ind in prop::collection::btree_set(-1000i32..1000, 1..30),
            ood in prop::collection::btree_set(1000i32..3000, 1..30),
        ) {
            let i: Vec<f64> = ind.iter().map(|&v| v as f64 * 0.5).collect();
            let o: Vec<f64> = ood.iter().map(|&v| (v - 2000) as f64 * 0.5 + 0.25).collect();
            prop_assert!((auroc(&i, &o).unwrap() + auroc(&o, &i).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn shift_leaves_logit_detectors_unchanged(
            rows in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 4..20),
            c in -50.0f64..50.0,
        ) {
            let half = rows.len() / 2;
            for d in [Detector::Msp, Detector::Energy] {
                let score = |shift: f64| -> Vec<f64> {
                    rows.iter().map(|r| {
                        let l: Vec<f64> = r.iter().map(|v| v + shift).collect();
                        match d {
                            Detector::Msp => msp_score(&l),
                            _ => energy_score(&l, 1.0).unwrap(),
                        }
                    }).collect()
                };
                let base = score(0.0);
                let moved = score(c);
                let a0 = auroc(&base[..half], &base[half..]).unwrap();
                let a1 = auroc(&moved[..half], &moved[half..]).unwrap();
                prop_assert!((a0 - a1).abs() < 1e-12, "{d}: {a0} vs {a1}");
            }
        }
    }
}
