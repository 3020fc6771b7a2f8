//! MSE, Pearson (LCC), Spearman (SRCC) and Kendall (KTAU) at utterance and
//! system level, and the predictions CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::ensure;
use crate::{Error, Result};

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<()> {
    ensure!(a.len() == b.len(), Argument, "length mismatch: {} vs {}", a.len(), b.len());
    ensure!(a.len() >= min, Argument, "need at least {min} values, got {}", a.len());
    ensure!(
        a.iter().chain(b).all(|v| v.is_finite()),
        Argument,
        "scores must be finite"
    );
    Ok(())
}

pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 1)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation.
pub fn lcc(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let ma = actual.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, a) in pred.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        sxy += dp * da;
        sxx += dp * dp;
        syy += da * da;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant list".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation as the Pearson correlation of fractional ranks.
pub fn srcc(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 2)?;
    lcc(&ranks(pred), &ranks(actual))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairCounts {
    /// Pairs untied in both lists.
    untied: u64,
    concordant: u64,
    discordant: u64,
    /// Pairs tied in the first / second list.
    ties_a: u64,
    ties_b: u64,
    total: u64,
}

fn tie_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run.saturating_sub(1)) / 2;
            run = 1;
        }
        prev = Some(v);
    }
    total + run * run.saturating_sub(1) / 2
}

/// Counts inversions of `v` while merge-sorting it.
fn count_inversions(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = count_inversions(&mut v[..mid], buf) + count_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            inv += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

fn pair_counts(a: &[f64], b: &[f64]) -> PairCounts {
    let n = a.len() as u64;
    let total = n * n.saturating_sub(1) / 2;
    let mut idx: Vec<usize> = (0..a.len()).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let ties_a = tie_pairs(idx.iter().map(|&i| a[i]));

    let mut joint = 0u64;
    let mut k = 0;
    while k < idx.len() {
        let mut m = k;
        while m + 1 < idx.len() && a[idx[m + 1]] == a[idx[k]] && b[idx[m + 1]] == b[idx[k]] {
            m += 1;
        }
        let run = (m - k + 1) as u64;
        joint += run * (run - 1) / 2;
        k = m + 1;
    }

    let mut ys: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let discordant = count_inversions(&mut ys, &mut buf);
    let ties_b = tie_pairs(ys.iter().copied());
    let untied = total + joint - ties_a - ties_b;
    PairCounts {
        untied,
        concordant: untied - discordant,
        discordant,
        ties_a,
        ties_b,
        total,
    }
}

/// Kendall's (C − D)/(C + D), pairs tied in either list left out.
pub fn ktau(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 2)?;
    let c = pair_counts(actual, pred);
    if c.untied == 0 {
        return Err(Error::UndefinedMetric("no untied pairs".into()));
    }
    Ok((c.concordant as f64 - c.discordant as f64) / c.untied as f64)
}

/// Kendall's tau-b.
pub fn ktau_b(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual, 2)?;
    let c = pair_counts(actual, pred);
    let denom = ((c.total - c.ties_a) as f64 * (c.total - c.ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("a list is entirely tied".into()));
    }
    Ok((c.concordant as f64 - c.discordant as f64) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub mse: f64,
    pub lcc: f64,
    pub srcc: f64,
    pub ktau: f64,
}

pub fn evaluate(pred: &[f64], actual: &[f64], tau_b: bool) -> Result<MetricSet> {
    Ok(MetricSet {
        mse: mse(pred, actual)?,
        lcc: lcc(pred, actual)?,
        srcc: srcc(pred, actual)?,
        ktau: if tau_b { ktau_b(pred, actual)? } else { ktau(pred, actual)? },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub system_id: String,
    pub utterance_id: String,
    pub predicted: f64,
    pub actual: f64,
}

/// Per-system means, ordered by system id.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemScores {
    pub systems: Vec<String>,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

pub fn system_level(records: &[PredictionRecord]) -> Result<SystemScores> {
    ensure!(!records.is_empty(), Argument, "no prediction records");
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry(&r.system_id).or_default();
        g.0 += r.predicted;
        g.1 += r.actual;
        g.2 += 1;
    }
    let mut out = SystemScores {
        systems: Vec::with_capacity(groups.len()),
        predicted: Vec::with_capacity(groups.len()),
        actual: Vec::with_capacity(groups.len()),
    };
    for (s, (p, a, n)) in groups {
        out.systems.push(s.to_owned());
        out.predicted.push(p / n as f64);
        out.actual.push(a / n as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Report {
    pub utterance: MetricSet,
    pub system: MetricSet,
    pub n_utterances: usize,
    pub n_systems: usize,
}

pub fn report(records: &[PredictionRecord], tau_b: bool) -> Result<Report> {
    ensure!(!records.is_empty(), Argument, "no prediction records");
    let pred: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    let actual: Vec<f64> = records.iter().map(|r| r.actual).collect();
    let sys = system_level(records)?;
    Ok(Report {
        utterance: evaluate(&pred, &actual, tau_b)?,
        system: evaluate(&sys.predicted, &sys.actual, tau_b)?,
        n_utterances: records.len(),
        n_systems: sys.systems.len(),
    })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,n,mse,lcc,srcc,ktau\n");
        for (name, n, m) in [
            ("utterance", self.n_utterances, &self.utterance),
            ("system", self.n_systems, &self.system),
        ] {
            s.push_str(&format!("{name},{n},{},{},{},{}\n", m.mse, m.lcc, m.srcc, m.ktau));
        }
        s
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8}", "level", "n", "MSE", "LCC", "SRCC", "KTAU")?;
        for (name, n, m) in [
            ("utterance", self.n_utterances, &self.utterance),
            ("system", self.n_systems, &self.system),
        ] {
            writeln!(
                f,
                "{name:<10} {n:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                m.mse, m.lcc, m.srcc, m.ktau
            )?;
        }
        Ok(())
    }
}

pub const PREDICTIONS_HEADER: [&str; 4] = ["system_id", "utterance_id", "predicted_mos", "true_mos"];

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTIONS_HEADER)?;
    for r in records {
        w.write_record([
            r.system_id.as_str(),
            r.utterance_id.as_str(),
            &r.predicted.to_string(),
            &r.actual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    parse_predictions(csv::Reader::from_path(path)?)
}

pub fn parse_predictions<R: std::io::Read>(mut r: csv::Reader<R>) -> Result<Vec<PredictionRecord>> {
    let header = r.headers()?.clone();
    ensure!(
        header.iter().map(str::trim).eq(PREDICTIONS_HEADER.iter().copied()),
        Format,
        "predictions header must be {}",
        PREDICTIONS_HEADER.join(",")
    );
    let num = |s: &str, line: usize| -> Result<f64> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: `{s}` is not a number")))?;
        ensure!(v.is_finite(), Format, "line {line}: score must be finite");
        Ok(v)
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        ensure!(rec.len() == 4, Format, "line {}: expected 4 fields", i + 2);
        out.push(PredictionRecord {
            system_id: rec[0].trim().to_owned(),
            utterance_id: rec[1].trim().to_owned(),
            predicted: num(&rec[2], i + 2)?,
            actual: num(&rec[3], i + 2)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_ktau(p: &[f64], a: &[f64]) -> (i64, i64) {
        let (mut c, mut d) = (0, 0);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let s = (p[i] - p[j]) * (a[i] - a[j]);
                if s > 0.0 {
                    c += 1;
                } else if s < 0.0 {
                    d += 1;
                }
            }
        }
        (c, d)
    }

    #[test]
    fn hand_values() {
        assert_eq!(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert!((lcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.981_980_506_061_965_7).abs() < 1e-12);
        assert!((srcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!((ktau(&[1.0, 3.0, 2.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((lcc(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(lcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(srcc(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(ktau(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(mse(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn fractional_ranks() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    #[test]
    fn system_grouping() {
        let rec = |s: &str, p, a| PredictionRecord {
            system_id: s.into(),
            utterance_id: String::new(),
            predicted: p,
            actual: a,
        };
        let s = system_level(&[rec("b", 1.0, 1.0), rec("a", 3.0, 2.0), rec("a", 4.0, 4.0)]).unwrap();
        assert_eq!(s.systems, vec!["a", "b"]);
        assert_eq!(s.predicted, vec![3.5, 1.0]);
        assert_eq!(s.actual, vec![3.0, 1.0]);
        assert!(system_level(&[]).is_err());
    }

    #[test]
    fn predictions_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let recs = vec![PredictionRecord {
            system_id: "s1".into(),
            utterance_id: "u1".into(),
            predicted: 3.125,
            actual: 2.5,
        }];
        write_predictions(&p, &recs).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), recs);
        std::fs::write(&p, "a,b,c,d\n").unwrap();
        assert!(matches!(read_predictions(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn ktau_matches_enumeration(
            p in prop::collection::vec(0i32..6, 2..40),
            a in prop::collection::vec(0i32..6, 40),
        ) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            let a: Vec<f64> = a[..p.len()].iter().map(|&v| f64::from(v)).collect();
            let (c, d) = naive_ktau(&p, &a);
            match ktau(&p, &a) {
                Ok(t) => prop_assert!((t - (c - d) as f64 / (c + d) as f64).abs() < 1e-12),
                Err(_) => prop_assert_eq!(c + d, 0),
            }
        }

        #[test]
        fn srcc_of_ties_is_pearson_of_ranks(
            p in prop::collection::vec(0i32..5, 3..30),
            a in prop::collection::vec(0i32..5, 30),
        ) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            let a: Vec<f64> = a[..p.len()].iter().map(|&v| f64::from(v)).collect();
            match (srcc(&p, &a), lcc(&ranks(&p), &ranks(&a))) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn monotone_invariance(p in prop::collection::vec(-5.0f64..5.0, 3..20), a in prop::collection::vec(-5.0f64..5.0, 20)) {
            let a = &a[..p.len()];
            let q: Vec<f64> = p.iter().map(|v| v.exp()).collect();
            if let (Ok(x), Ok(y)) = (srcc(&p, a), srcc(&q, a)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            if let (Ok(x), Ok(y)) = (ktau(&p, a), ktau(&q, a)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
