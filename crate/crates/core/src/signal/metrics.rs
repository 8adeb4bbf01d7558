use std::f64::consts::LN_10;

use super::dtw::{dtw, AlignmentPath};
use super::mel::MelCepstra;
use super::SignalError;

/// `10 / ln 10 · √2`, the dB scale applied to the cepstral Euclidean distance.
pub const MCD_SCALE: f64 = 10.0 / LN_10 * std::f64::consts::SQRT_2;

#[derive(Debug, Clone)]
pub struct McdResult {
    pub mcd_db: f64,
    pub path: AlignmentPath,
}

/// Mel-cepstral distortion after DTW alignment, in dB.
///
/// Per aligned pair the distortion is `(10/ln 10)·sqrt(2·Σ_d (c_d − ĉ_d)²)`;
/// the result is the mean over the path. The 0th coefficient is never part of
/// [`MelCepstra`].
pub fn mcd(reference: &MelCepstra, hypothesis: &MelCepstra) -> Result<McdResult, SignalError> {
    if reference.order != hypothesis.order {
        return Err(SignalError::OrderMismatch(reference.order, hypothesis.order));
    }
    let (path, cost) = dtw(&reference.frames, &hypothesis.frames)?;
    Ok(McdResult {
        mcd_db: MCD_SCALE * cost / path.len() as f64,
        path,
    })
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, SignalError> {
    if u.len() != v.len() {
        return Err(SignalError::Config(format!(
            "vector lengths differ: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SignalError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cepstra(rng: &mut ChaCha8Rng, frames: usize, order: usize) -> MelCepstra {
        MelCepstra::from_frames(
            (0..frames)
                .map(|_| (0..order).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_distortion_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_cepstra(&mut rng, 7, 13);
        assert_eq!(mcd(&a, &a).unwrap().mcd_db, 0.0);
    }

    #[test]
    fn uniform_shift_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_cepstra(&mut rng, 9, 13);
        let delta = 0.05;
        let b =
            MelCepstra::from_frames(a.frames.iter().map(|f| f.iter().map(|v| v + delta).collect()).collect()).unwrap();
        let want = 10.0 / LN_10 * (2.0 * 13.0 * delta * delta).sqrt();
        assert!((mcd(&a, &b).unwrap().mcd_db - want).abs() < 1e-9);
    }

    #[test]
    fn order_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_cepstra(&mut rng, 3, 13);
        let b = random_cepstra(&mut rng, 3, 12);
        assert!(matches!(mcd(&a, &b), Err(SignalError::OrderMismatch(13, 12))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]),
            Err(SignalError::ZeroVector)
        ));
    }
}
