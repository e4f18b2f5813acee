//! Confusion matrices, one-vs-rest metrics, cross-validation folds and
//! evaluation reports.
//!
//! Metrics are percentages. A division with a zero denominator yields
//! `None`, never zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// `counts[actual][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = class_names.len();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                actual: counts.len(),
            });
        }
        Ok(Self { class_names, counts })
    }

    pub fn from_predictions(class_names: Vec<String>, actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Dimension {
                expected: actual.len(),
                actual: predicted.len(),
            });
        }
        let mut m = Self::zeros(class_names);
        for (&a, &p) in actual.iter().zip(predicted) {
            m.record(a, p)?;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        let n = self.n_classes();
        if actual >= n || predicted >= n {
            return Err(Error::InvalidArgument(format!(
                "class index ({actual}, {predicted}) outside {n} classes"
            )));
        }
        self.counts[actual][predicted] += 1;
        Ok(())
    }

    /// Elementwise sum.
    pub fn add(&mut self, other: &Self) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::InvalidArgument(
                "confusion matrices have different classes".into(),
            ));
        }
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (v, o) in row.iter_mut().zip(orow) {
                *v += o;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// trace / total in percent.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: Option<f64>,
    pub ppv: Option<f64>,
    pub sen: Option<f64>,
    pub spec: Option<f64>,
}

/// One-vs-rest metrics of class `c`.
pub fn per_class_metrics(m: &ConfusionMatrix, c: usize) -> Result<ClassMetrics> {
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    if c >= m.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {c} outside {} classes",
            m.n_classes()
        )));
    }
    let tp = m.counts[c][c];
    let fn_ = m.counts[c].iter().sum::<u64>() - tp;
    let fp = m.counts.iter().map(|r| r[c]).sum::<u64>() - tp;
    let tn = total - tp - fn_ - fp;
    Ok(ClassMetrics {
        acc: ratio(tp + tn, total),
        ppv: ratio(tp, tp + fp),
        sen: ratio(tp, tp + fn_),
        spec: ratio(tn, tn + fp),
    })
}

/// Harmonic mean of ppv and sen (percent in, percent out).
pub fn f1(ppv: Option<f64>, sen: Option<f64>) -> Option<f64> {
    let (p, s) = (ppv?, sen?);
    (p + s > 0.0).then(|| 2.0 * p * s / (p + s))
}

/// Per-class F1 and their unweighted mean over defined entries.
pub fn f1_and_mf1(metrics: &[ClassMetrics]) -> (Vec<Option<f64>>, Option<f64>) {
    let f1s: Vec<Option<f64>> = metrics.iter().map(|m| f1(m.ppv, m.sen)).collect();
    (f1s.clone(), macro_f1(&f1s))
}

pub fn macro_f1(f1s: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = f1s.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Rounds a percentage to 2 decimals, ties to even.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn folds_from_assignment(fold_of: &[usize], k: usize) -> Vec<Fold> {
    (0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..fold_of.len()).partition(|&i| fold_of[i] == f);
            Fold { train, test }
        })
        .collect()
}

/// k-fold split over example labels. Stratified folds deal each class's
/// shuffled examples round-robin, so class counts per fold differ by at
/// most one.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} examples cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    if stratified {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        if let Some((&class, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
            return Err(Error::Stratification {
                class,
                count: members.len(),
                folds: k,
            });
        }
        let mut next = 0;
        for members in by_class.values_mut() {
            members.shuffle(&mut rng);
            for &i in members.iter() {
                fold_of[i] = next % k;
                next += 1;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in order.iter().enumerate() {
            fold_of[i] = pos % k;
        }
    }
    Ok(folds_from_assignment(&fold_of, k))
}

/// Inter-patient split: every group (e.g. record id) lands in one fold.
/// Groups are shuffled and each goes to the currently smallest fold.
pub fn group_kfold_split(groups: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut names: Vec<&String> = groups.iter().collect();
    names.sort();
    names.dedup();
    if k < 2 || names.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} groups cannot fill {k} folds",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);
    let mut sizes = vec![0usize; k];
    let mut fold_of_group = BTreeMap::new();
    for name in names {
        let n = groups.iter().filter(|g| *g == name).count();
        let f = (0..k).min_by_key(|&f| (sizes[f], f)).expect("k >= 2");
        sizes[f] += n;
        fold_of_group.insert(name.clone(), f);
    }
    let fold_of: Vec<usize> = groups.iter().map(|g| fold_of_group[g]).collect();
    Ok(folds_from_assignment(&fold_of, k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum FoldStatus {
    Ok,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    #[serde(flatten)]
    pub status: FoldStatus,
    pub n_train: usize,
    pub n_test: usize,
    pub confusion: Option<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub fingerprint: String,
    pub folds: Vec<FoldReport>,
    pub pooled: ConfusionMatrix,
    pub per_class: Vec<ClassReport>,
    pub overall_accuracy: Option<f64>,
    pub mf1: Option<f64>,
    /// Some fold failed; pooled figures cover the rest only.
    pub partial: bool,
}

impl EvalReport {
    /// Pools fold matrices by summation and derives all metrics.
    pub fn assemble(
        task: impl Into<String>,
        fingerprint: impl Into<String>,
        class_names: Vec<String>,
        folds: Vec<FoldReport>,
    ) -> Result<Self> {
        let mut pooled = ConfusionMatrix::zeros(class_names.clone());
        for f in &folds {
            if let Some(m) = &f.confusion {
                pooled.add(m)?;
            }
        }
        let partial = folds.iter().any(|f| matches!(f.status, FoldStatus::Failed { .. }));
        let (per_class, mf1) = if pooled.total() > 0 {
            let metrics = (0..class_names.len())
                .map(|c| per_class_metrics(&pooled, c))
                .collect::<Result<Vec<_>>>()?;
            let (f1s, mf1) = f1_and_mf1(&metrics);
            let per_class = class_names
                .iter()
                .zip(metrics)
                .zip(f1s)
                .map(|((name, metrics), f1)| ClassReport {
                    name: name.clone(),
                    metrics,
                    f1,
                })
                .collect();
            (per_class, mf1)
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            task: task.into(),
            fingerprint: fingerprint.into(),
            overall_accuracy: pooled.accuracy(),
            folds,
            pooled,
            per_class,
            mf1,
            partial,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned text table: pooled matrix with per-class metrics.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", round2(x)));
        let names = &self.pooled.class_names;
        let w = names
            .iter()
            .map(String::len)
            .chain(self.pooled.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "task: {}  folds: {}  fingerprint: {}",
            self.task,
            self.folds.len(),
            self.fingerprint
        );
        let _ = write!(out, "{:>w$} |", "actual");
        for n in names {
            let _ = write!(out, " {n:>w$}");
        }
        let _ = writeln!(
            out,
            " | {:>7} {:>7} {:>7} {:>7} {:>7}",
            "acc", "ppv", "sen", "spec", "f1"
        );
        for (i, row) in self.pooled.counts.iter().enumerate() {
            let _ = write!(out, "{:>w$} |", names[i]);
            for c in row {
                let _ = write!(out, " {c:>w$}");
            }
            match self.per_class.get(i) {
                Some(r) => {
                    let _ = writeln!(
                        out,
                        " | {:>7} {:>7} {:>7} {:>7} {:>7}",
                        fmt(r.metrics.acc),
                        fmt(r.metrics.ppv),
                        fmt(r.metrics.sen),
                        fmt(r.metrics.spec),
                        fmt(r.f1)
                    );
                }
                None => out.push_str(" |\n"),
            }
        }
        let _ = writeln!(
            out,
            "overall accuracy: {}  MF1: {}",
            fmt(self.overall_accuracy),
            fmt(self.mf1)
        );
        for f in &self.folds {
            if let FoldStatus::Failed { error } = &f.status {
                let _ = writeln!(out, "fold {} FAILED: {error}", f.fold);
            }
        }
        if self.partial {
            out.push_str("PARTIAL: pooled figures exclude failed folds\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn mitbih_matrix() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(
            names(&["N", "S", "V", "F", "Q"]),
            vec![
                vec![89774, 203, 357, 37, 91],
                vec![757, 1945, 56, 1, 18],
                vec![632, 51, 6449, 44, 47],
                vec![175, 3, 95, 527, 2],
                vec![639, 11, 62, 1, 7314],
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let m = ConfusionMatrix::from_counts(names(&["a", "b"]), vec![vec![5, 0], vec![0, 5]]).unwrap();
        for c in 0..2 {
            let r = per_class_metrics(&m, c).unwrap();
            assert_eq!([r.acc, r.ppv, r.sen, r.spec], [Some(100.0); 4]);
        }
    }

    #[test]
    fn mitbih_class_n() {
        let r = per_class_metrics(&mitbih_matrix(), 0).unwrap();
        assert_eq!(round2(r.acc.unwrap()), 97.35);
        assert_eq!(round2(r.ppv.unwrap()), 97.60);
        assert_eq!(round2(r.sen.unwrap()), 99.24);
        assert_eq!(round2(r.spec.unwrap()), 88.30);
    }

    #[test]
    fn mitbih_class_v_spec_from_counts() {
        // FP = 570, TN = 101498
        let r = per_class_metrics(&mitbih_matrix(), 2).unwrap();
        assert!((r.spec.unwrap() - 100.0 * 101498.0 / 102068.0).abs() < 1e-12);
        assert_eq!(round2(r.spec.unwrap()), 99.44);
    }

    #[test]
    fn undefined_divisions_are_absent() {
        let m = ConfusionMatrix::from_counts(names(&["a", "b"]), vec![vec![3, 0], vec![2, 0]]).unwrap();
        let b = per_class_metrics(&m, 1).unwrap();
        assert_eq!(b.ppv, None);
        assert_eq!(b.sen, Some(0.0));
        assert_eq!(f1(b.ppv, b.sen), None);
        assert!(per_class_metrics(&ConfusionMatrix::zeros(names(&["a"])), 0).is_err());
    }

    #[test]
    fn f1_edges() {
        assert_eq!(f1(Some(100.0), Some(100.0)), Some(100.0));
        assert_eq!(f1(Some(0.0), Some(50.0)), Some(0.0));
        assert_eq!(f1(Some(0.0), Some(0.0)), None);
        let mf1 = macro_f1(&[Some(82.26), Some(63.47), Some(56.69), Some(55.18)]).unwrap();
        assert!((mf1 - 64.40).abs() < 0.005);
        assert_eq!(macro_f1(&[None, Some(50.0)]), Some(50.0));
    }

    #[test]
    fn round_half_even() {
        assert_eq!(round2(0.125), 0.12);
        assert_eq!(round2(0.375), 0.38);
        assert_eq!(round2(97.6049), 97.6);
    }

    #[test]
    fn kfold_trivial_cases() {
        let folds = kfold_split(&[0; 10], 5, 1, false).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        let labels: Vec<usize> = [0; 8].into_iter().chain([1; 2]).collect();
        let folds = kfold_split(&labels, 2, 3, true).unwrap();
        for f in &folds {
            assert_eq!(f.test.iter().filter(|&&i| labels[i] == 1).count(), 1);
        }
        assert_eq!(kfold_split(&labels, 2, 3, true).unwrap(), folds);
    }

    #[test]
    fn stratification_error_has_hint() {
        let labels = vec![0, 0, 0, 0, 1];
        let err = kfold_split(&labels, 2, 0, true).unwrap_err();
        assert!(matches!(
            err,
            Error::Stratification {
                class: 1,
                count: 1,
                folds: 2
            }
        ));
        assert!(!err.to_string().is_empty());
    }

    #[test]
    fn group_split_keeps_groups_together() {
        let groups: Vec<String> = (0..40).map(|i| format!("r{}", i % 7)).collect();
        let folds = group_kfold_split(&groups, 3, 2).unwrap();
        for f in &folds {
            for &i in &f.test {
                assert!(f.train.iter().all(|&j| groups[j] != groups[i]));
            }
        }
        assert_eq!(folds.iter().map(|f| f.test.len()).sum::<usize>(), 40);
    }

    proptest! {
        #[test]
        fn stratified_folds_partition(labels in prop::collection::vec(0usize..3, 30..120), k in 2usize..6, seed in any::<u64>()) {
            let mut counts = [0usize; 3];
            for &l in &labels { counts[l] += 1; }
            prop_assume!(counts.iter().all(|&c| c == 0 || c >= k));
            let folds = kfold_split(&labels, k, seed, true).unwrap();
            let mut seen = vec![0; labels.len()];
            for f in &folds {
                for &i in &f.test { seen[i] += 1; }
                prop_assert_eq!(f.train.len() + f.test.len(), labels.len());
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
            for c in 0..3 {
                let per: Vec<usize> = folds.iter().map(|f| f.test.iter().filter(|&&i| labels[i] == c).count()).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }

    fn report() -> EvalReport {
        let a = ConfusionMatrix::from_counts(names(&["x", "y"]), vec![vec![4, 1], vec![0, 5]]).unwrap();
        let b = ConfusionMatrix::from_counts(names(&["x", "y"]), vec![vec![5, 0], vec![2, 3]]).unwrap();
        let folds = vec![
            FoldReport {
                fold: 0,
                status: FoldStatus::Ok,
                n_train: 10,
                n_test: 10,
                confusion: Some(a),
            },
            FoldReport {
                fold: 1,
                status: FoldStatus::Ok,
                n_train: 10,
                n_test: 10,
                confusion: Some(b),
            },
            FoldReport {
                fold: 2,
                status: FoldStatus::Failed { error: "boom".into() },
                n_train: 10,
                n_test: 10,
                confusion: None,
            },
        ];
        EvalReport::assemble("toy", "abc", names(&["x", "y"]), folds).unwrap()
    }

    #[test]
    fn pooled_is_sum_and_partial_flagged() {
        let r = report();
        assert_eq!(r.pooled.counts, vec![vec![9, 1], vec![2, 8]]);
        assert_eq!(r.pooled.total(), 20);
        assert_eq!(r.overall_accuracy, Some(85.0));
        assert!(r.partial);
        let table = r.render_table();
        assert!(table.contains("fold 2 FAILED: boom"));
        assert!(table.contains("85.00"));
    }

    #[test]
    fn report_json_round_trip() {
        let r = report();
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
