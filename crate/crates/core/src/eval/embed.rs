//! Embedding export with a two-component PCA projection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::Condition;

use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub utt_id: String,
    pub speaker_id: String,
    pub condition: Condition,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fit `k` components to the rows of `x`.
    pub fn fit(x: &[Vec<f64>], k: usize) -> Result<Self, EvalError> {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        if n < 2 || d == 0 || x.iter().any(|r| r.len() != d) {
            return Err(EvalError::Data("PCA needs at least two rows of equal width".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centred = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
        let cov = centred.transpose() * &centred / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let k = k.min(d);
        let components = order[..k]
            .iter()
            .map(|&c| {
                let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                // Fix the sign so the largest-magnitude entry is positive.
                let big = v
                    .iter()
                    .copied()
                    .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                v.iter().map(|x| if big < 0.0 { -x } else { *x }).collect()
            })
            .collect();
        let variances = order[..k].iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Write `utt_id, speaker_id, condition, pca_x, pca_y, v0..` as TSV and
/// return the fitted projection.
pub fn export_embeddings(rows: &[EmbeddingRow], out_path: &Path) -> Result<Pca, EvalError> {
    if rows.len() < 3 {
        return Err(EvalError::Data(format!(
            "need at least 3 utterances, got {}",
            rows.len()
        )));
    }
    let vecs: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.clone()).collect();
    let pca = Pca::fit(&vecs, 2)?;
    let d = vecs[0].len();
    let mut out = String::from("utt_id\tspeaker_id\tcondition\tpca_x\tpca_y");
    for j in 0..d {
        let _ = write!(out, "\tv{j}");
    }
    out.push('\n');
    for r in rows {
        let p = pca.project(&r.vector);
        let _ = write!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}",
            r.utt_id,
            r.speaker_id,
            r.condition,
            p[0],
            p.get(1).unwrap_or(&0.0)
        );
        for v in &r.vector {
            let _ = write!(out, "\t{v:.6}");
        }
        out.push('\n');
    }
    if let Some(dir) = out_path.parent() {
        fs::create_dir_all(dir).map_err(|e| EvalError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(out_path, out).map_err(|e| EvalError::Io(format!("{}: {e}", out_path.display())))?;
    Ok(pca)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, v: Vec<f64>) -> EmbeddingRow {
        EmbeddingRow {
            utt_id: format!("u{i}"),
            speaker_id: "s".into(),
            condition: Condition::Clean,
            vector: v,
        }
    }

    #[test]
    fn collinear_points_have_one_component() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let pca = Pca::fit(&pts, 2).unwrap();
        assert!(pca.variances[1] < 1e-10);
        assert!(pca.variances[0] > pca.variances[1]);
        let dir = &pca.components[0];
        let n = 6f64.sqrt();
        assert!((dir[0].abs() - 1.0 / n).abs() < 1e-9 && (dir[1].abs() - 2.0 / n).abs() < 1e-9);
    }

    #[test]
    fn export_shape_and_minimum() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("e.tsv");
        let rows: Vec<_> = (0..5).map(|i| row(i, vec![i as f64, (i * i) as f64, 1.0])).collect();
        export_embeddings(&rows, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.split('\t').count() == 8));
        assert!(export_embeddings(&rows[..2], &p).is_err());
    }
}
