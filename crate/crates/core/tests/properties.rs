//! Property tests for the stated invariants of each module.

use datclone::cloning::total_loss;
use datclone::corpus::{Condition, NoiseKind};
use datclone::diffcore::{Tape, Tensor, Var};
use datclone::model::{
    AcousticModel, Dropout, ModelConfig, PaddedBatch, ReconLoss, SpeakerInput, TfItem, TfVars, Variant,
};
use datclone::signal::*;
use proptest::prelude::*;

fn frames(max_len: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 1..=max_len)
}

fn brute_cost(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let here = euclidean(&a[i], &b[j]);
    if (i, j) == (a.len() - 1, b.len() - 1) {
        return here;
    }
    let mut best = f64::INFINITY;
    for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
        if i + di < a.len() && j + dj < b.len() {
            best = best.min(brute_cost(a, b, i + di, j + dj));
        }
    }
    here + best
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_mels: 4,
        vocab_size: 8,
        d_emb: 3,
        conv_layers: 1,
        d_conv: 4,
        d_enc: 4,
        prenet: vec![5, 4],
        d_z: 3,
        d_spk: 2,
        n_speakers: 3,
        d_tag: 2,
        d_dec: 3,
        d_cls: 3,
        ..ModelConfig::toy(Variant::Adaptation)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_matches_enumeration_and_paths_are_valid(d in 1usize..4, a in frames(6, 3), b in frames(5, 3)) {
        let a: Vec<Vec<f64>> = a.into_iter().map(|f| f[..d].to_vec()).collect();
        let b: Vec<Vec<f64>> = b.into_iter().map(|f| f[..d].to_vec()).collect();
        prop_assume!(a.len() * b.len() <= 30);
        let (path, cost) = dtw(&a, &b).unwrap();
        prop_assert!(path.is_valid(a.len(), b.len()));
        let want = brute_cost(&a, &b, 0, 0);
        prop_assert!((cost - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn mcd_is_zero_on_itself_and_symmetric(a in frames(12, 5), b in frames(12, 5)) {
        let ca = MelCepstra::from_frames(a.clone()).unwrap();
        prop_assert_eq!(mcd(&ca, &ca).unwrap().mcd_db, 0.0);
        let n = a.len().min(b.len());
        let (x, y) = (
            MelCepstra::from_frames(a[..n].to_vec()).unwrap(),
            MelCepstra::from_frames(b[..n].to_vec()).unwrap(),
        );
        let (xy, yx) = (mcd(&x, &y).unwrap(), mcd(&y, &x).unwrap());
        prop_assert!((xy.mcd_db - yx.mcd_db).abs() <= 1e-9 * xy.mcd_db.max(1.0));
    }

    #[test]
    fn mixing_hits_the_requested_snr(snr in 0.0f64..25.0, seed in 0u64..1000, loud in 0.05f64..0.9, kind in 0usize..4) {
        let sr = DEFAULT_SAMPLE_RATE;
        let clean: Vec<f64> = (0..4000).map(|i| loud * (i as f64 * 0.07).sin()).collect();
        let clean = Waveform::new(clean, sr).unwrap();
        let noise = datclone::corpus::generate_noise(NoiseKind::ALL[kind], 6000, sr, seed);
        let noise = Waveform::new(noise.iter().map(|v| v * 3.0).collect(), sr).unwrap();
        let m = mix_at_snr(&clean, &noise, snr, seed).unwrap();
        prop_assert!(m.waveform.peak() <= PEAK_LIMIT + 1e-12);
        prop_assert!((snr_db(&clean.samples, &m.scaled_noise) - snr).abs() < 0.01);
        let re = measure_mixture_snr(&clean.samples, &m.waveform.samples, m.info.gain);
        prop_assert!((re - snr).abs() < 0.01);
    }

    #[test]
    fn log_mel_is_scale_covariant(k in 0.1f64..1.0, seed in 0u64..100) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = AnalysisConfig::toy();
        let w: Vec<f64> = (0..2048).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let a = mel_spectrogram(&Waveform::new(w.clone(), 16_000).unwrap(), &cfg).unwrap();
        let b = mel_spectrogram(&Waveform::new(w.iter().map(|v| v * k).collect(), 16_000).unwrap(), &cfg).unwrap();
        let floor = cfg.log_floor();
        let mut checked = 0;
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (x, y) in fa.iter().zip(fb) {
                if *x > floor + 1.0 && *y > floor + 1.0 {
                    prop_assert!((y - x - (k * k).ln()).abs() < 1e-9);
                    checked += 1;
                }
            }
        }
        prop_assert!(checked > 0);
    }

    #[test]
    fn grl_is_identity_forward_and_reversed_backward(
        lambda in 0.0f64..10.0,
        x in prop::collection::vec(-1e6f64..1e6, 1..20),
        up in prop::collection::vec(-1e6f64..1e6, 20),
    ) {
        let n = x.len();
        let mut t = Tape::new();
        let v = t.leaf(Tensor::row_vector(x.clone())).unwrap();
        let y = t.grl(v, lambda).unwrap();
        prop_assert_eq!(t.value(y).data(), &x[..]);
        let mut g = t.backward_with(y, Tensor::row_vector(up[..n].to_vec())).unwrap();
        let gx = g.take_or_zeros(v, 1, n);
        for (a, u) in gx.data().iter().zip(&up) {
            prop_assert_eq!(*a, -lambda * u);
        }
    }

    #[test]
    fn reported_loss_decomposes(
        lambda in 0.0f64..2.0,
        lens in prop::collection::vec(1usize..6, 1..4),
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let mut rt = |r: usize, c: usize| -> Tensor {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut outs = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        for (k, &t) in lens.iter().enumerate() {
            let pred: Var = tape.constant(rt(t, 3)).unwrap();
            let logits: Var = tape.constant(rt(t, 2)).unwrap();
            outs.push(TfVars { pred, z: logits, logits, alpha: logits, mu: logits });
            targets.push(rt(t, 3));
            labels.push(vec![k % 2; t]);
        }
        let refs: Vec<&Tensor> = targets.iter().collect();
        for recon in [ReconLoss::L1, ReconLoss::L2] {
            let (_, p) = total_loss(&mut tape, &outs, &refs, &labels, lambda, recon, [1.0; 2]).unwrap();
            prop_assert_eq!(p.total, p.rcon + lambda * p.ce);
            prop_assert_eq!(p.frames, lens.iter().sum::<usize>());
        }
    }

    #[test]
    fn attention_is_monotone_and_normalised(tokens in prop::collection::vec(0usize..8, 1..5), seed in 0u64..50) {
        let model = AcousticModel::new(tiny_config(), seed).unwrap();
        let syn = model
            .synthesize(
                &tokens,
                &SpeakerInput::Table(1),
                Some(Condition::Clean),
                12,
                Dropout::Seeded(seed),
                &AnalysisConfig { n_mels: 4, cepstral_order: 2, ..AnalysisConfig::toy() },
            )
            .unwrap();
        for row in &syn.alpha {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for w in syn.mu.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                prop_assert!(b >= a);
            }
        }
    }

    #[test]
    fn teacher_forcing_ignores_padding(short in 1usize..5, extra in 1usize..4, seed in 0u64..50) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let model = AcousticModel::new(tiny_config(), seed).unwrap();
        let mut item = |t: usize, spk: usize| TfItem {
            tokens: vec![1, 3, 2],
            frames: Tensor::new(t, 4, (0..t * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            speaker: SpeakerInput::Table(spk),
            tag: Some(Condition::Noisy),
        };
        let (a, b) = (item(short, 0), item(short + extra, 2));
        let both = model.teacher_forced_pass(&PaddedBatch::new(vec![a.clone(), b]), 0.1, Dropout::Seeded(3)).unwrap();
        let alone = model.teacher_forced_pass(&PaddedBatch::new(vec![a]), 0.1, Dropout::Seeded(3)).unwrap();
        prop_assert_eq!(&both[0], &alone[0]);
        prop_assert_eq!(both[0].pred.rows(), short);
    }
}
