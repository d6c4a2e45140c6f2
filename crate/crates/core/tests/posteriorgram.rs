use ndarray::{array, Array2};
use proptest::prelude::*;
use s2i_core::posteriorgram::{
    load_posteriorgram, save_posteriorgram, synthesize_posteriorgram, CharacterAlphabet, ConfusionMatrix,
    FrameRange, Posteriorgram, PosteriorgramError, SynthesisConfig,
};
use s2i_core::seed;

fn alphabet() -> CharacterAlphabet {
    CharacterAlphabet::new("# abcdefghijklmnopqrstuvwxyz".chars(), '#').unwrap()
}

fn row_lse(row: ndarray::ArrayView1<f64>) -> f64 {
    row.iter().map(|x| x.exp()).sum::<f64>().ln()
}

const WORDS: [&str; 8] = ["put", "ace", "on", "king", "go", "left", "slowly", "home"];

fn transcript(seed: u64) -> String {
    let mut s = seed;
    let n = 1 + (s % 4) as usize;
    let mut words = Vec::new();
    for _ in 0..n {
        s = seed::derive(s, &[7]);
        words.push(WORDS[(s % WORDS.len() as u64) as usize]);
    }
    words.join(" ")
}

#[test]
fn synthesised_rows_log_sum_exp_to_zero() {
    let a = alphabet();
    let confusion = ConfusionMatrix::random(a.len(), 0.5, &mut seed::rng(11));
    for k in 0..1000u64 {
        let cfg = SynthesisConfig {
            confusion_noise: (k % 10) as f64 / 10.0,
            confusion: if k % 2 == 0 { Some(confusion.clone()) } else { None },
            seed: k,
            ..Default::default()
        };
        let pg = synthesize_posteriorgram(&transcript(k), &a, &cfg).unwrap();
        for row in pg.frames().rows() {
            assert!(row_lse(row).abs() < 1e-5);
        }
    }
}

#[test]
fn synthesis_is_deterministic() {
    let a = alphabet();
    let cfg = SynthesisConfig {
        seed: 42,
        ..Default::default()
    };
    let x = synthesize_posteriorgram("put ace on king", &a, &cfg).unwrap();
    let y = synthesize_posteriorgram("put ace on king", &a, &cfg).unwrap();
    assert_eq!(x, y);
    let z = synthesize_posteriorgram("put ace on king", &a, &SynthesisConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(x, z);
}

#[test]
fn zero_noise_two_characters() {
    let a = CharacterAlphabet::new("#ab".chars(), '#').unwrap();
    let cfg = SynthesisConfig {
        confusion_noise: 0.0,
        frames_per_char: FrameRange::new(1, 1),
        leading_silence: FrameRange::new(0, 0),
        trailing_silence: FrameRange::new(0, 0),
        ..Default::default()
    };
    let pg = synthesize_posteriorgram("ab", &a, &cfg).unwrap();
    assert_eq!(pg.num_frames(), 2);
    let p = pg.probabilities();
    assert!((p[[0, 1]] - 1.0).abs() < 1e-7 && (p[[1, 2]] - 1.0).abs() < 1e-7);
    assert!(p[[0, 0]] < 1e-7 && p[[0, 2]] < 1e-7 && p[[1, 0]] < 1e-7 && p[[1, 1]] < 1e-7);
}

/// Mean probability of the true character, computed from a zero-noise
/// synthesis with the same seed (identical durations) to locate the truth.
fn true_char_mass(eps: f64) -> f64 {
    let a = alphabet();
    let confusion = ConfusionMatrix::random(a.len(), 1.0, &mut seed::rng(5));
    let mut total = 0.0;
    let mut count = 0.0;
    for k in 0..50u64 {
        let text = transcript(k + 100);
        let base = SynthesisConfig {
            confusion: Some(confusion.clone()),
            seed: k,
            ..Default::default()
        };
        let clean = synthesize_posteriorgram(&text, &a, &SynthesisConfig { confusion_noise: 0.0, ..base.clone() }).unwrap();
        let noisy = synthesize_posteriorgram(&text, &a, &SynthesisConfig { confusion_noise: eps, ..base }).unwrap();
        let (pc, pn) = (clean.probabilities(), noisy.probabilities());
        for t in 0..pc.nrows() {
            let truth = (0..pc.ncols()).max_by(|&i, &j| pc[[t, i]].total_cmp(&pc[[t, j]])).unwrap();
            total += pn[[t, truth]];
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn corruption_is_monotone_in_noise() {
    let masses: Vec<f64> = [0.0, 0.1, 0.3, 0.5].iter().map(|&e| true_char_mass(e)).collect();
    for w in masses.windows(2) {
        assert!(w[1] <= w[0], "{masses:?}");
    }
    assert!((masses[0] - 1.0).abs() < 1e-6);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pg");
    let pg = Posteriorgram::from_probabilities(&array![[0.2, 0.3, 0.5], [0.7, 0.2, 0.1]], 0.04).unwrap();
    save_posteriorgram(&pg, &path).unwrap();
    let back = load_posteriorgram(&path).unwrap();
    assert_eq!(back.frames().dim(), (2, 3));
    for (x, y) in pg.frames().iter().zip(back.frames().iter()) {
        assert!((x - y).abs() < 1e-9);
    }
    assert_eq!(back.frame_period(), 0.04);
}

#[test]
fn row_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.pg");
    let pg = Posteriorgram::from_probabilities(&array![[0.5, 0.5], [0.9, 0.1]], 0.04).unwrap();
    let text = pg.to_text();
    let mut lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "2 2 0.04");
    lines[0] = "3 2 0.04";
    std::fs::write(&path, lines.join("\n")).unwrap();
    assert!(matches!(
        load_posteriorgram(&path),
        Err(PosteriorgramError::RowCount { declared: 3, found: 2 })
    ));
}

#[test]
fn unnormalised_row_is_rejected() {
    let pg = Posteriorgram::from_probabilities(&array![[0.5, 0.5], [0.5, 0.5]], 0.04).unwrap();
    let text = pg.to_text();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    // ln(0.5) + 0.5 in both entries of the last row: log-sum-exp 0.5
    let shifted = (0.5f64).ln() + 0.5;
    let last = lines.len() - 1;
    lines[last] = format!("{shifted:e} {shifted:e}");
    match Posteriorgram::from_text(&lines.join("\n")) {
        Err(PosteriorgramError::NotNormalized { row: 1, log_sum_exp }) => {
            assert!((log_sum_exp - 0.5).abs() < 1e-12)
        }
        other => panic!("expected a normalisation error, got {other:?}"),
    }
}

#[test]
fn out_of_range_noise_is_a_config_error() {
    let cfg = SynthesisConfig {
        confusion_noise: 1.5,
        ..Default::default()
    };
    let err = synthesize_posteriorgram("ab", &alphabet(), &cfg).unwrap_err();
    assert!(err.to_string().contains("confusion_noise out of range"), "{err}");
    assert_eq!(err.kind(), s2i_core::ErrorKind::Config);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_stochastic(text in "[a-z]{1,6}( [a-z]{1,6}){0,3}", eps in 0.0f64..0.99, seed in any::<u64>()) {
        let cfg = SynthesisConfig { confusion_noise: eps, seed, ..Default::default() };
        let pg = synthesize_posteriorgram(&text, &alphabet(), &cfg).unwrap();
        for row in pg.probabilities().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn loaded_rows_are_stochastic(raw in proptest::collection::vec(0.0f64..1.0, 12)) {
        let probs = Array2::from_shape_vec((4, 3), raw).unwrap();
        prop_assume!(probs.rows().into_iter().all(|r| r.sum() > 1e-3));
        let pg = Posteriorgram::from_probabilities(&probs, 0.04).unwrap();
        let back = Posteriorgram::from_text(&pg.to_text()).unwrap();
        for row in back.probabilities().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }
}
