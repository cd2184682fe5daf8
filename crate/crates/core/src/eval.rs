//! Word-accuracy evaluation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction (percent) of exact case-normalized matches.
pub fn word_accuracy(preds: &[String], gts: &[String]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyEval);
    }
    let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Sample-count-weighted average of per-set accuracies.
pub fn weighted_avg(accs: &[f64], counts: &[usize]) -> Result<f64> {
    if accs.len() != counts.len() {
        return Err(Error::LengthMismatch {
            preds: accs.len(),
            gts: counts.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if accs.is_empty() || total == 0 {
        return Err(Error::EmptyEval);
    }
    let sum: f64 = accs
        .iter()
        .zip(counts)
        .map(|(a, &n)| a * n as f64)
        .sum();
    Ok(sum / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean wall time per greedy decode in milliseconds, when timed.
    pub ms_per_image: Option<f64>,
}

impl EvalReport {
    pub fn from_pairs(name: &str, preds: &[String], gts: &[String]) -> Result<Self> {
        let accuracy = word_accuracy(preds, gts)?;
        let correct = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
        Ok(Self {
            name: name.to_string(),
            n: preds.len(),
            correct,
            accuracy,
            ms_per_image: None,
        })
    }
}

/// Writes one `id<TAB>pred<TAB>gt<TAB>{0|1}` line per sample.
pub fn dump_predictions(
    path: &Path,
    ids: &[String],
    preds: &[String],
    gts: &[String],
) -> Result<()> {
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for ((id, p), g) in ids.iter().zip(preds).zip(gts) {
        let hit = if p == g { 1 } else { 0 };
        writeln!(w, "{id}\t{p}\t{g}\t{hit}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn accuracy_basic() {
        let acc = word_accuracy(&s(&["cat", "dog", "cow"]), &s(&["cat", "dog", "pig"])).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(word_accuracy(&s(&["a"]), &s(&["a"])).unwrap(), 100.0);
        assert_eq!(word_accuracy(&s(&["a"]), &s(&["b"])).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_errors() {
        assert!(matches!(
            word_accuracy(&s(&["a"]), &s(&["a", "b"])),
            Err(Error::LengthMismatch { preds: 1, gts: 2 })
        ));
        assert!(matches!(word_accuracy(&[], &[]), Err(Error::EmptyEval)));
    }

    #[test]
    fn weighted_avg_spec_case() {
        let avg = weighted_avg(&[90.0, 100.0], &[1, 3]).unwrap();
        assert_eq!(avg, 97.5);
    }

    #[test]
    fn weighted_avg_edge_cases() {
        assert_eq!(weighted_avg(&[80.0], &[500]).unwrap(), 80.0);
        let avg = weighted_avg(&[50.0, 70.0, 90.0], &[2, 2, 2]).unwrap();
        assert!((avg - 70.0).abs() < 1e-12);
        assert!(matches!(
            weighted_avg(&[1.0], &[1, 2]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(weighted_avg(&[], &[]), Err(Error::EmptyEval)));
        assert!(matches!(
            weighted_avg(&[50.0], &[0]),
            Err(Error::EmptyEval)
        ));
    }

    #[test]
    fn report_counts() {
        let r = EvalReport::from_pairs("t", &s(&["x", "y"]), &s(&["x", "z"])).unwrap();
        assert_eq!(r.n, 2);
        assert_eq!(r.correct, 1);
        assert_eq!(r.accuracy, 50.0);
    }

    #[test]
    fn prediction_dump_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.tsv");
        dump_predictions(
            &path,
            &s(&["im0", "im1"]),
            &s(&["cat", "dgo"]),
            &s(&["cat", "dog"]),
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "im0\tcat\tcat\t1\nim1\tdgo\tdog\t0\n");
    }
}
