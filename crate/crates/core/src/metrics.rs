//! Multi-label evaluation: per-class confusion counts, F-beta, weighted F2
//! over defect classes, F1 of the no-defect meta-class, mAP, and
//! micro-averaged precision/recall.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Class vocabulary, in label-vector order. All five are defect classes.
pub const CLASSES: [&str; 5] = ["DE", "FS", "AF", "GR", "OK"];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    fn tally(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

fn check_shapes(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} score rows against {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let c = scores.first().map_or(0, Vec::len);
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        if s.len() != c || l.len() != c {
            return Err(Error::dim(format!(
                "row {i}: {} scores and {} labels, expected {c}",
                s.len(),
                l.len()
            )));
        }
    }
    Ok(c)
}

/// Per-class counts; a prediction is positive iff `score > threshold`.
pub fn confusion_per_class(scores: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<Vec<Counts>> {
    let c = check_shapes(scores, labels)?;
    let mut counts = vec![Counts::default(); c];
    for (s, l) in scores.iter().zip(labels) {
        for k in 0..c {
            counts[k].tally(s[k] > threshold, l[k]);
        }
    }
    Ok(counts)
}

/// `(1+β²)TP / ((1+β²)TP + β²FN + FP)`, 0 when the denominator is 0.
pub fn f_beta(c: Counts, beta: f64) -> f64 {
    let b2 = beta * beta;
    let num = (1.0 + b2) * c.tp as f64;
    let den = num + b2 * c.fn_ as f64 + c.fp as f64;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Importance weight per class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(pub BTreeMap<String, f64>);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self(CLASSES.iter().map(|c| (c.to_string(), 1.0)).collect())
    }

    /// Reads a `class,weight` CSV with a header row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut map = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let (Some(name), Some(w)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::format(path, format!("row {}: expected class,weight", i + 2)));
            };
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad weight `{w}`", i + 2)))?;
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::format(path, format!("row {}: weight must be finite and >= 0", i + 2)));
            }
            map.insert(name.trim().to_string(), w);
        }
        let weights = Self(map);
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.0.values().any(|&w| w > 0.0) {
            return Err(Error::Config("class weights need at least one positive entry".into()));
        }
        Ok(())
    }
}

/// Weighted mean of per-class F2 over the defect classes.
pub fn f2_ciw(counts: &[Counts], weights: &ClassWeights) -> Result<f64> {
    if counts.len() != CLASSES.len() {
        return Err(Error::dim(format!(
            "expected counts for {} classes, got {}",
            CLASSES.len(),
            counts.len()
        )));
    }
    weights.validate()?;
    let (mut num, mut den) = (0.0, 0.0);
    for (name, &c) in CLASSES.iter().zip(counts) {
        let w = *weights
            .0
            .get(*name)
            .ok_or_else(|| Error::Config(format!("no class weight for {name}")))?;
        num += w * f_beta(c, 2.0);
        den += w;
    }
    if den == 0.0 {
        return Err(Error::Config("class weights sum to zero".into()));
    }
    Ok(num / den)
}

/// F1 of the meta-class "no defect": actual iff every label is 0,
/// predicted iff every score is at or below `threshold`.
pub fn f1_normal(scores: &[Vec<f64>], labels: &[Vec<bool>], threshold: f64) -> Result<f64> {
    check_shapes(scores, labels)?;
    let mut c = Counts::default();
    for (s, l) in scores.iter().zip(labels) {
        c.tally(s.iter().all(|&v| v <= threshold), l.iter().all(|&v| !v));
    }
    Ok(f_beta(c, 1.0))
}

/// Average precision of one class; `None` when it has no positives.
/// Ties keep input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// Per-class AP, `None` for skipped classes.
    pub per_class: Vec<Option<f64>>,
}

pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapReport> {
    let c = check_shapes(scores, labels)?;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
            average_precision(&s, &l)
        })
        .collect();
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::EmptyEvaluation("no class has a positive label".into()));
    }
    Ok(MapReport {
        map: included.iter().sum::<f64>() / included.len() as f64,
        per_class,
    })
}

/// Micro-averaged precision and recall over all classes.
pub fn overall_precision_recall(counts: &[Counts]) -> (f64, f64) {
    let tp: usize = counts.iter().map(|c| c.tp).sum();
    let fp: usize = counts.iter().map(|c| c.fp).sum();
    let fn_: usize = counts.iter().map(|c| c.fn_).sum();
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    (ratio(tp, fp), ratio(tp, fn_))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub f1_normal: f64,
    pub f2_ciw: f64,
    pub map: f64,
    pub overall_precision: f64,
    pub overall_recall: f64,
    pub per_class_f2: Vec<f64>,
    pub per_class_ap: Vec<Option<f64>>,
}

pub fn evaluate(scores: &[Vec<f64>], labels: &[Vec<bool>], weights: &ClassWeights, threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::EmptyEvaluation("no samples to evaluate".into()));
    }
    let counts = confusion_per_class(scores, labels, threshold)?;
    let (op, or) = overall_precision_recall(&counts);
    let map = mean_average_precision(scores, labels)?;
    Ok(MetricsReport {
        samples: scores.len(),
        f1_normal: f1_normal(scores, labels, threshold)?,
        f2_ciw: f2_ciw(&counts, weights)?,
        map: map.map,
        overall_precision: op,
        overall_recall: or,
        per_class_f2: counts.iter().map(|&c| f_beta(c, 2.0)).collect(),
        per_class_ap: map.per_class,
    })
}

impl MetricsReport {
    /// `metric,value` rows at full precision.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("f1_normal".into(), self.f1_normal.to_string()),
            ("f2_ciw".into(), self.f2_ciw.to_string()),
            ("map".into(), self.map.to_string()),
            ("overall_precision_micro".into(), self.overall_precision.to_string()),
            ("overall_recall_micro".into(), self.overall_recall.to_string()),
        ];
        for (name, f2) in CLASSES.iter().zip(&self.per_class_f2) {
            rows.push((format!("f2_{name}"), f2.to_string()));
        }
        for (name, ap) in CLASSES.iter().zip(&self.per_class_ap) {
            rows.push((format!("ap_{name}"), ap.map_or("skipped".into(), |a| a.to_string())));
        }
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("samples            {}\n", self.samples);
        out.push_str(&format!("F1-Normal          {:.4}\n", self.f1_normal));
        out.push_str(&format!("F2-CIW             {:.4}\n", self.f2_ciw));
        out.push_str(&format!("mAP                {:.4}\n", self.map));
        out.push_str(&format!("OP (micro)         {:.4}\n", self.overall_precision));
        out.push_str(&format!("OR (micro)         {:.4}\n", self.overall_recall));
        out.push_str("class  F2      AP\n");
        for ((name, f2), ap) in CLASSES.iter().zip(&self.per_class_f2).zip(&self.per_class_ap) {
            let ap = ap.map_or("skipped".to_string(), |a| format!("{a:.4}"));
            out.push_str(&format!("{name:<6} {f2:.4}  {ap}\n"));
        }
        out
    }
}

/// Writes `sample_id,class,score` rows.
pub fn write_predictions(path: &Path, ids: &[String], scores: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["sample_id", "class", "score"]).map_err(wrap)?;
    for (id, row) in ids.iter().zip(scores) {
        for (name, s) in CLASSES.iter().zip(row) {
            w.write_record([id.as_str(), name, &s.to_string()]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `sample_id,class,label` rows.
pub fn write_labels(path: &Path, ids: &[String], labels: &[Vec<bool>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["sample_id", "class", "label"]).map_err(wrap)?;
    for (id, row) in ids.iter().zip(labels) {
        for (name, &l) in CLASSES.iter().zip(row) {
            w.write_record([id.as_str(), name, if l { "1" } else { "0" }]).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_long(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut ids: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = i + 2;
        let (Some(id), Some(class), Some(v)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            return Err(Error::format(path, format!("line {line}: expected three fields")));
        };
        let k = CLASSES
            .iter()
            .position(|c| *c == class.trim())
            .ok_or_else(|| Error::format(path, format!("line {line}: unknown class `{class}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {line}: bad value `{v}`")))?;
        let entry = rows.entry(id.to_string()).or_insert_with(|| {
            ids.push(id.to_string());
            vec![None; CLASSES.len()]
        });
        entry[k] = Some(v);
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in &ids {
        let row = &rows[id];
        let full: Option<Vec<f64>> = row.iter().copied().collect();
        out.push(full.ok_or_else(|| Error::format(path, format!("sample {id} is missing a class")))?);
    }
    Ok((ids, out))
}

pub fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    read_long(path)
}

pub fn read_labels(path: &Path) -> Result<(Vec<String>, Vec<Vec<bool>>)> {
    let (ids, rows) = read_long(path)?;
    let labels = rows.into_iter().map(|r| r.into_iter().map(|v| v != 0.0).collect()).collect();
    Ok((ids, labels))
}
