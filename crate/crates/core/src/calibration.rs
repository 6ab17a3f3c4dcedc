//! Expected calibration error and reliability-diagram bins.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::diffmodel::{softmax, ModelOutput};
use crate::error::{contract, Result};

pub const DEFAULT_BINS: usize = 10;

/// One row of the reliability diagram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub calib_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Binning {
    /// Intervals ((m−1)/M, m/M].
    #[default]
    EqualWidth,
    /// M groups of (nearly) equal count after sorting by confidence.
    EqualMass,
}

/// Σ (count/n) · calib_error over the bins, in order. The report's `ece` is
/// computed with this function, so re-reading the CSV reproduces it exactly.
pub fn ece_from_bins(bins: &[CalibrationBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * b.calib_error)
        .sum()
}

fn summarize(lower: f64, upper: f64, conf: &[f64], correct: &[bool], members: &[usize]) -> CalibrationBin {
    let count = members.len();
    if count == 0 {
        return CalibrationBin {
            bin_lower: lower,
            bin_upper: upper,
            count: 0,
            mean_confidence: 0.0,
            accuracy: 0.0,
            calib_error: 0.0,
        };
    }
    let c = count as f64;
    let sum_conf: f64 = members.iter().map(|&i| conf[i]).sum();
    let hits = members.iter().filter(|&&i| correct[i]).count() as f64;
    let gap: f64 = members
        .iter()
        .map(|&i| if correct[i] { 1.0 } else { 0.0 } - conf[i])
        .sum();
    CalibrationBin {
        bin_lower: lower,
        bin_upper: upper,
        count,
        mean_confidence: sum_conf / c,
        accuracy: hits / c,
        calib_error: gap.abs() / c,
    }
}

/// Equal-width binning into `m_bins` intervals over (0, 1].
pub fn bin_predictions(confidences: &[f64], correct: &[bool], m_bins: usize) -> Result<CalibrationReport> {
    bin_predictions_with(confidences, correct, m_bins, Binning::EqualWidth)
}

pub fn bin_predictions_with(
    confidences: &[f64],
    correct: &[bool],
    m_bins: usize,
    binning: Binning,
) -> Result<CalibrationReport> {
    if confidences.len() != correct.len() {
        return Err(contract(format!(
            "{} confidences but {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    if m_bins == 0 {
        return Err(contract("need at least one bin"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(contract(format!("confidence {c} outside [0, 1]")));
    }
    let n = confidences.len();
    let bins = match binning {
        Binning::EqualWidth => {
            let mut members = vec![Vec::new(); m_bins];
            for (i, &c) in confidences.iter().enumerate() {
                // bin m holds ((m-1)/M, m/M]; zero falls into the first bin
                let idx = ((c * m_bins as f64).ceil() as usize).clamp(1, m_bins) - 1;
                members[idx].push(i);
            }
            members
                .iter()
                .enumerate()
                .map(|(m, idx)| {
                    summarize(
                        m as f64 / m_bins as f64,
                        (m + 1) as f64 / m_bins as f64,
                        confidences,
                        correct,
                        idx,
                    )
                })
                .collect()
        }
        Binning::EqualMass => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));
            let mut bins = Vec::with_capacity(m_bins);
            let mut start = 0;
            let mut lower = 0.0;
            for m in 0..m_bins {
                let end = (m + 1) * n / m_bins;
                let idx = &order[start..end];
                let upper = if m + 1 == m_bins {
                    1.0
                } else {
                    idx.last().map_or(lower, |&i| confidences[i])
                };
                bins.push(summarize(lower, upper, confidences, correct, idx));
                lower = upper;
                start = end;
            }
            bins
        }
    };
    let ece = ece_from_bins(&bins);
    Ok(CalibrationReport { bins, ece, n })
}


/// Per-example max softmax probability.
pub fn confidence_of(output: &ModelOutput) -> Result<Vec<f64>> {
    match output {
        ModelOutput::Logits(m) => Ok((0..m.rows)
            .map(|i| softmax(m.row(i)).into_iter().fold(0.0, f64::max))
            .collect()),
        ModelOutput::Scalars(_) => Err(contract("confidence needs a classification head")),
    }
}

/// Writes `bin_lower,bin_upper,count,mean_confidence,accuracy,calib_error`.
pub fn write_reliability_csv<W: Write>(report: &CalibrationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for b in &report.bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reliability_csv<R: Read>(input: R) -> Result<Vec<CalibrationBin>> {
    let mut r = csv::Reader::from_reader(input);
    let mut bins = Vec::new();
    for row in r.deserialize() {
        bins.push(row?);
    }
    Ok(bins)
}

/// Reads a predictions file with a `confidence,correct` header; `correct`
/// accepts 0/1 or true/false.
pub fn read_predictions_csv<R: Read>(input: R) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| contract(format!("predictions file lacks a {name:?} column")))
    };
    let (ci, ki) = (find("confidence")?, find("correct")?);
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let c: f64 = field(ci).parse().map_err(|_| crate::Error::Parse {
            line,
            column: ci + 1,
            message: format!("bad confidence {:?}", field(ci)),
        })?;
        let k = match field(ki).as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(crate::Error::Parse {
                    line,
                    column: ki + 1,
                    message: format!("bad correctness flag {other:?}"),
                })
            }
        };
        conf.push(c);
        correct.push(k);
    }
    Ok((conf, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmodel::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_confidence_has_zero_ece() {
        let r = bin_predictions(&[1.0; 5], &[true; 5], 10).unwrap();
        assert_eq!(r.ece, 0.0);
        assert_eq!(r.bins[9].count, 5);
    }

    #[test]
    fn hand_computed_four_sample_example() {
        let r = bin_predictions(&[0.75, 0.75, 0.95, 0.95], &[true, false, true, true], 10).unwrap();
        assert_eq!(r.bins[7].count, 2);
        assert!((r.bins[7].calib_error - 0.25).abs() < 1e-15);
        assert_eq!(r.bins[9].count, 2);
        assert!((r.bins[9].calib_error - 0.05).abs() < 1e-15);
        assert!((r.ece - 0.15).abs() < 1e-15);
        assert_eq!(r.n, 4);
    }

    #[test]
    fn bernoulli_calibrated_sampler_has_small_ece() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..=1.0)).collect();
        let correct: Vec<bool> = conf.iter().map(|&c| rng.gen_bool(c)).collect();
        let r = bin_predictions(&conf, &correct, 10).unwrap();
        assert!(r.ece <= 0.02, "{}", r.ece);
    }

    #[test]
    fn constant_predictor() {
        let conf = vec![0.8; 10];
        let correct: Vec<bool> = (0..10).map(|i| i < 6).collect();
        let r = bin_predictions(&conf, &correct, 10).unwrap();
        assert!((r.ece - 0.2).abs() < 1e-12);
    }

    #[test]
    fn csv_rows_reconstruct_ece_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conf: Vec<f64> = (0..500).map(|_| rng.gen_range(0.5..=1.0)).collect();
        let correct: Vec<bool> = (0..500).map(|_| rng.gen_bool(0.7)).collect();
        for binning in [Binning::EqualWidth, Binning::EqualMass] {
            let r = bin_predictions_with(&conf, &correct, 10, binning).unwrap();
            let mut buf = Vec::new();
            write_reliability_csv(&r, &mut buf).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(text.starts_with("bin_lower,bin_upper,count,mean_confidence,accuracy,calib_error\n"));
            let bins = read_reliability_csv(&buf[..]).unwrap();
            assert_eq!(bins, r.bins);
            assert_eq!(ece_from_bins(&bins), r.ece);
            assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 500);
        }
    }

    #[test]
    fn equal_mass_bins_have_balanced_counts() {
        let conf: Vec<f64> = (0..95).map(|i| 0.5 + i as f64 / 200.0).collect();
        let correct = vec![true; 95];
        let r = bin_predictions_with(&conf, &correct, 10, Binning::EqualMass).unwrap();
        assert!(r.bins.iter().all(|b| b.count == 9 || b.count == 10));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(bin_predictions(&[0.5], &[true, false], 10).is_err());
    }

    #[test]
    fn confidence_examples() {
        let out = ModelOutput::Logits(Matrix::new(2, 4, vec![0.0; 8]).unwrap());
        assert_eq!(confidence_of(&out).unwrap(), vec![0.25, 0.25]);
        let out = ModelOutput::Logits(Matrix::new(1, 2, vec![10.0, 0.0]).unwrap());
        assert!((confidence_of(&out).unwrap()[0] - 1.0).abs() < 1e-4);
        assert!(confidence_of(&ModelOutput::Scalars(vec![1.0])).is_err());
    }

    #[test]
    fn confidence_matches_max_of_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let m = Matrix::new(10, 3, data).unwrap();
        let conf = confidence_of(&ModelOutput::Logits(m.clone())).unwrap();
        for i in 0..10 {
            let row = m.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((conf[i] - best.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn predictions_csv_parsing() {
        let (c, k) = read_predictions_csv("confidence,correct\n0.9,1\n0.6,false\n".as_bytes()).unwrap();
        assert_eq!(c, vec![0.9, 0.6]);
        assert_eq!(k, vec![true, false]);
        let err = read_predictions_csv("confidence,correct\n0.9,maybe\n".as_bytes()).unwrap_err();
        assert!(matches!(err, crate::Error::Parse { line: 2, column: 2, .. }));
    }

    proptest::proptest! {
        #[test]
        fn ece_is_permutation_invariant(seed in 0u64..1000, rot in 0usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conf: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..=1.0)).collect();
            let correct: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.6)).collect();
            let a = bin_predictions(&conf, &correct, 10).unwrap();
            let (mut c2, mut k2) = (conf.clone(), correct.clone());
            c2.rotate_left(rot);
            k2.rotate_left(rot);
            let b = bin_predictions(&c2, &k2, 10).unwrap();
            proptest::prop_assert!((a.ece - b.ece).abs() < 1e-12);
            proptest::prop_assert!(a.ece >= 0.0 && a.ece <= 1.0);
        }
    }
}
