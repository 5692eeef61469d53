//! Embedding-quality metrics: cosine separation between same-writer and
//! different-writer pairs (in the native dimension and after 2-d reduction)
//! plus downstream classification metrics.

pub mod tsne;

use crate::error::{Error, Result};
use crate::handcrafted::Embedding;
use crate::seeds;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

pub use tsne::reduce_2d;

pub fn cosine_raw(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine needs equal dims, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("undefined cosine for a zero vector".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    cosine_raw(a.values(), b.values())
}

/// Mean same-writer and different-writer cosines, native and 2-d.
/// `separation_*` is intra minus inter; negative values are possible and
/// preserved.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeparationReport {
    pub method: String,
    pub intra_nd: f64,
    pub inter_nd: f64,
    pub intra_2d: f64,
    pub inter_2d: f64,
    pub separation_nd: f64,
    pub separation_2d: f64,
    pub n_intra_pairs: usize,
    pub n_inter_pairs: usize,
}

/// Intra = every within-writer pair; inter = a seeded sample of cross-writer
/// pairs of the same count, so both means average the same number of terms.
pub fn separation_report(embeddings: &[Embedding], seed: u64) -> Result<SeparationReport> {
    let mut by_writer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        by_writer.entry(e.sample_ref().writer_id).or_default().push(i);
    }
    if by_writer.len() < 2 {
        return Err(Error::Protocol(format!(
            "separation needs >= 2 writers, got {}",
            by_writer.len()
        )));
    }
    for (w, idxs) in &by_writer {
        if idxs.len() < 2 {
            return Err(Error::Protocol(format!(
                "writer {w} has {} embedding(s); need >= 2",
                idxs.len()
            )));
        }
    }
    let method = embeddings[0].method().to_string();
    if embeddings.iter().any(|e| e.method().to_string() != method) {
        return Err(Error::Protocol("mixed embedding methods in one report".into()));
    }

    let mut intra_pairs = Vec::new();
    for idxs in by_writer.values() {
        for i in 0..idxs.len() {
            for j in i + 1..idxs.len() {
                intra_pairs.push((idxs[i], idxs[j]));
            }
        }
    }

    let n = embeddings.len();
    let writer_of: Vec<u32> = embeddings.iter().map(|e| e.sample_ref().writer_id).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "inter-pairs", &[]));
    let mut chosen = HashSet::with_capacity(intra_pairs.len());
    let inter_capacity = {
        let total = n * (n - 1) / 2;
        total - intra_pairs.len()
    };
    let want = intra_pairs.len().min(inter_capacity);
    if want == 0 {
        return Err(Error::Protocol("no cross-writer pairs available".into()));
    }
    while chosen.len() < want {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        if a == b || writer_of[a] == writer_of[b] {
            continue;
        }
        chosen.insert((a, b));
    }
    let mut inter_pairs: Vec<(usize, usize)> = chosen.into_iter().collect();
    inter_pairs.sort_unstable();

    let mean_cos = |pairs: &[(usize, usize)], rows: &dyn Fn(usize) -> Vec<f64>| -> Result<f64> {
        let mut sum = 0.0;
        for &(a, b) in pairs {
            sum += cosine_raw(&rows(a), &rows(b))?;
        }
        Ok(sum / pairs.len() as f64)
    };

    let nd_rows = |i: usize| embeddings[i].values().to_vec();
    let intra_nd = mean_cos(&intra_pairs, &nd_rows)?;
    let inter_nd = mean_cos(&inter_pairs, &nd_rows)?;

    let dim = embeddings[0].dim();
    let mut matrix = Array2::zeros((n, dim));
    for (i, e) in embeddings.iter().enumerate() {
        matrix.row_mut(i).assign(&ndarray::ArrayView1::from(e.values()));
    }
    let projected = reduce_2d(&matrix, seed)?;
    let p_rows = |i: usize| projected.row(i).to_vec();
    let intra_2d = mean_cos(&intra_pairs, &p_rows)?;
    let inter_2d = mean_cos(&inter_pairs, &p_rows)?;

    Ok(SeparationReport {
        method,
        intra_nd,
        inter_nd,
        intra_2d,
        inter_2d,
        separation_nd: intra_nd - inter_nd,
        separation_2d: intra_2d - inter_2d,
        n_intra_pairs: intra_pairs.len(),
        n_inter_pairs: inter_pairs.len(),
    })
}

/// Pairwise verification quality. `zero_division` records that precision,
/// recall, or F1 hit an empty denominator and was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VerificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub zero_division: bool,
}

impl VerificationMetrics {
    pub fn total(&self) -> usize {
        self.true_positive + self.true_negative + self.false_positive + self.false_negative
    }
}

/// Positive class is "same writer" (label 1).
pub fn classification_metrics(labels: &[u8], predictions: &[u8]) -> Result<VerificationMetrics> {
    if labels.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "labels ({}) and predictions ({}) differ in length",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(predictions) {
        match (l, p) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "labels must be binary, got {other:?}"
                )))
            }
        }
    }
    let n = labels.len() as f64;
    let mut zero_division = false;
    let mut guarded = |num: f64, den: f64| -> f64 {
        if den == 0.0 {
            zero_division = true;
            0.0
        } else {
            num / den
        }
    };
    let accuracy = (tp + tn) as f64 / n;
    let precision = guarded(tp as f64, (tp + fp) as f64);
    let recall = guarded(tp as f64, (tp + fn_) as f64);
    let f1 = guarded(2.0 * precision * recall, precision + recall);
    Ok(VerificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        true_positive: tp,
        true_negative: tn,
        false_positive: fp,
        false_negative: fn_,
        zero_division,
    })
}

/// One results-table row: separation columns plus downstream accuracy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub intra_nd: f64,
    pub inter_nd: f64,
    pub intra_2d: f64,
    pub inter_2d: f64,
    pub accuracy: Option<f64>,
}

impl ReportRow {
    pub fn new(sep: &SeparationReport, accuracy: Option<f64>) -> Self {
        Self {
            method: sep.method.clone(),
            intra_nd: sep.intra_nd,
            inter_nd: sep.inter_nd,
            intra_2d: sep.intra_2d,
            inter_2d: sep.inter_2d,
            accuracy,
        }
    }
}

pub const REPORT_CSV_HEADER: &str = "method,intra_nd,inter_nd,intra_2d,inter_2d,accuracy";

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "{REPORT_CSV_HEADER}").map_err(io)?;
    for r in rows {
        let acc = r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{:.4},{}",
            r.method, r.intra_nd, r.inter_nd, r.intra_2d, r.inter_2d, acc
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_report_json(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::InvalidArgument(format!("report serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SampleRef;
    use crate::handcrafted::FeatureMethod;
    use proptest::prelude::*;

    fn emb(writer: u32, sample: u32, values: Vec<f64>) -> Embedding {
        Embedding::new(
            values,
            FeatureMethod::Ssl("test".into()),
            SampleRef { writer_id: writer, sample_index: sample },
        )
        .unwrap()
    }

    #[test]
    fn cosine_reference_values() {
        assert!((cosine_raw(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974632).abs() < 1e-6);
        assert_eq!(cosine_raw(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = [0.3, -0.7, 2.0];
        assert!((cosine_raw(&h, &h).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatched() {
        assert!(cosine_raw(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        assert!(cosine_raw(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_scale_invariant_and_bounded(
            a in proptest::collection::vec(-100.0f64..100.0, 4),
            b in proptest::collection::vec(-100.0f64..100.0, 4),
            c in 0.001f64..1000.0,
        ) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
            let ab = cosine_raw(&a, &b).unwrap();
            let ba = cosine_raw(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
            let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
            let self_cos = cosine_raw(&a, &scaled).unwrap();
            prop_assert!((self_cos - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_embeddings_collapse_nd_separation() {
        let v = vec![0.5, 1.0, -0.25, 2.0];
        let embeddings: Vec<Embedding> = (1..=3u32)
            .flat_map(|w| (0..2u32).map(move |s| (w, s)))
            .map(|(w, s)| emb(w, s, v.clone()))
            .collect();
        let rep = separation_report(&embeddings, 0).unwrap();
        assert!((rep.intra_nd - 1.0).abs() < 1e-12);
        assert!((rep.inter_nd - 1.0).abs() < 1e-12);
        assert!(rep.separation_nd.abs() < 1e-12);
        assert_eq!(rep.n_intra_pairs, rep.n_inter_pairs);
    }

    #[test]
    fn orthogonal_writer_clusters_separate_perfectly() {
        let mut embeddings = Vec::new();
        for s in 0..3u32 {
            embeddings.push(emb(1, s, vec![1.0, 0.0, 0.0, 0.0]));
            embeddings.push(emb(2, s, vec![0.0, 0.0, 1.0, 0.0]));
        }
        let rep = separation_report(&embeddings, 1).unwrap();
        assert!((rep.intra_nd - 1.0).abs() < 1e-12);
        assert!(rep.inter_nd.abs() < 1e-12);
        assert!((rep.separation_nd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separation_is_deterministic_and_counts_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let embeddings: Vec<Embedding> = (1..=4u32)
            .flat_map(|w| (0..3u32).map(move |s| (w, s)))
            .map(|(w, s)| {
                let base: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                emb(w, s, base)
            })
            .collect();
        let a = separation_report(&embeddings, 7).unwrap();
        let b = separation_report(&embeddings, 7).unwrap();
        assert_eq!(a, b);
        // 4 writers x C(3,2) = 12 intra pairs.
        assert_eq!(a.n_intra_pairs, 12);
        assert_eq!(a.n_inter_pairs, 12);
    }

    #[test]
    fn separation_rejects_thin_inputs() {
        let one_writer = vec![emb(1, 0, vec![1.0]), emb(1, 1, vec![1.0])];
        assert!(separation_report(&one_writer, 0).is_err());
        let lone_sample = vec![
            emb(1, 0, vec![1.0, 0.0]),
            emb(1, 1, vec![1.0, 0.0]),
            emb(2, 0, vec![0.0, 1.0]),
        ];
        assert!(separation_report(&lone_sample, 0).is_err());
    }

    #[test]
    fn metrics_on_perfect_predictions() {
        let labels = [1, 0, 1, 0, 1];
        let m = classification_metrics(&labels, &labels).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        assert!(!m.zero_division);
        assert_eq!(m.total(), 5);
    }

    #[test]
    fn all_positive_on_balanced_set() {
        let labels = [1, 1, 0, 0];
        let preds = [1, 1, 1, 1];
        let m = classification_metrics(&labels, &preds).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.precision, 0.5);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_denominators_flag_and_zero() {
        // No positive predictions and no positive labels: precision,
        // recall, and f1 all guard to 0.
        let m = classification_metrics(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.zero_division);
    }

    #[test]
    fn metrics_match_confusion_oracle_on_random_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(500);
        for _ in 0..1000 {
            let n = rng.gen_range(1..40);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            let preds: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            let m = classification_metrics(&labels, &preds).unwrap();

            let mut counts = [0usize; 4]; // tp tn fp fn
            for (&l, &p) in labels.iter().zip(&preds) {
                match (l, p) {
                    (1, 1) => counts[0] += 1,
                    (0, 0) => counts[1] += 1,
                    (0, 1) => counts[2] += 1,
                    _ => counts[3] += 1,
                }
            }
            assert_eq!(
                (m.true_positive, m.true_negative, m.false_positive, m.false_negative),
                (counts[0], counts[1], counts[2], counts[3])
            );
            assert_eq!(m.total(), n);
            let acc = (counts[0] + counts[1]) as f64 / n as f64;
            assert!((m.accuracy - acc).abs() < 1e-12);
            if counts[0] + counts[2] > 0 {
                let p = counts[0] as f64 / (counts[0] + counts[2]) as f64;
                assert!((m.precision - p).abs() < 1e-12);
            }
            if counts[0] + counts[3] > 0 {
                let r = counts[0] as f64 / (counts[0] + counts[3]) as f64;
                assert!((m.recall - r).abs() < 1e-12);
            }
            if m.precision + m.recall > 0.0 {
                let f = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                assert!((m.f1 - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_metric_inputs() {
        assert!(classification_metrics(&[1, 0], &[1]).is_err());
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&[2], &[1]).is_err());
    }

    #[test]
    fn report_rows_serialize_in_table_order() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ReportRow {
            method: "ssl:vicreg".into(),
            intra_nd: 0.69,
            inter_nd: 0.48,
            intra_2d: 0.9,
            inter_2d: 0.85,
            accuracy: Some(0.78),
        }];
        let csv_path = dir.path().join("report.csv");
        write_report_csv(&csv_path, &rows).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "method,intra_nd,inter_nd,intra_2d,inter_2d,accuracy"
        );
        assert_eq!(lines.next().unwrap(), "ssl:vicreg,0.6900,0.4800,0.9000,0.8500,0.7800");

        let json_path = dir.path().join("report.json");
        write_report_json(&json_path, &rows).unwrap();
        let back: Vec<ReportRow> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back, rows);
    }
}
