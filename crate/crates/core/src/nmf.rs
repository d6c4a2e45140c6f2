//! Supervised NMF intent learner.
//!
//! Training factorises the stacked matrix `[β·V_s; V_a] ≈ [W_s; W_a]·H`
//! where each column is one utterance: its many-hot intent on top and its
//! length-normalised HAC embedding below. At test time only the acoustic
//! part is observed, so activations are inferred against the frozen `W_a`
//! and the intent is read off as `W_s·h`.
//!
//! All updates are the Lee–Seung multiplicative rules for the generalised
//! Kullback–Leibler divergence `D(V‖WH) = Σ V·ln(V/WH) − V + WH`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::features::{HacConfig, HacVector, SemanticVector};
use crate::seed;
use crate::textio;

const INFER_STREAM: u64 = 0x1f;

#[derive(Debug, Error)]
pub enum NmfError {
    #[error("invalid NMF config: {0}")]
    InvalidConfig(String),
    #[error("no training pairs")]
    NoTrainingData,
    #[error("{what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("HAC delays differ between training utterances: [{0}] vs [{1}]")]
    MixedDelays(String, String),
    #[error("non-finite value in factorization")]
    NonFinite,
    #[error("malformed NMF model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl NmfError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            NmfError::Dimension { .. } | NmfError::MixedDelays(..) => ErrorKind::Incompatible,
            NmfError::NonFinite => ErrorKind::Numerical,
            NmfError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }
}

type Result<T> = std::result::Result<T, NmfError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmfConfig {
    /// Number of dictionary columns; `None` uses the semantic dimension + 5.
    pub rank: Option<usize>,
    pub train_iters: usize,
    pub infer_iters: usize,
    /// Lower bound for factor entries and reconstruction denominators.
    pub floor: f64,
    /// Weight β of the semantic rows relative to the normalised acoustics.
    pub semantic_weight: f64,
    /// Random initialisations tried during training; the lowest final
    /// divergence wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            rank: None,
            train_iters: 200,
            infer_iters: 100,
            floor: 1e-12,
            semantic_weight: 1.0,
            restarts: 1,
            seed: 0,
        }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NmfError::InvalidConfig(m));
        if self.rank == Some(0) {
            return bad("rank must be >= 1".into());
        }
        if self.train_iters == 0 || self.infer_iters == 0 {
            return bad("iteration counts must be >= 1".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return bad(format!("floor {} must be positive", self.floor));
        }
        if !(self.semantic_weight.is_finite() && self.semantic_weight > 0.0) {
            return bad(format!("semantic weight {} must be positive", self.semantic_weight));
        }
        Ok(())
    }

    pub fn rank_for(&self, semantic_dim: usize) -> usize {
        self.rank.unwrap_or(semantic_dim + 5)
    }
}

/// Generalised KL divergence `D(V‖WH)`. Zero entries of `V` contribute
/// `(WH)_ij`; reconstructions are clamped to `floor`.
pub fn generalized_kl(v: ArrayView2<f64>, wh: ArrayView2<f64>, floor: f64) -> f64 {
    v.iter()
        .zip(wh.iter())
        .map(|(&x, &y)| {
            let y = y.max(floor);
            if x > 0.0 {
                x * (x / y).ln() - x + y
            } else {
                y
            }
        })
        .sum()
}

fn ratio(v: ArrayView2<f64>, wh: &Array2<f64>, floor: f64) -> Array2<f64> {
    let mut r = wh.clone();
    ndarray::Zip::from(&mut r)
        .and(&v)
        .for_each(|r, &x| *r = x / r.max(floor));
    r
}

fn update_activations(v: ArrayView2<f64>, w: &Array2<f64>, h: &mut Array2<f64>, wh: &Array2<f64>, floor: f64) {
    let num = w.t().dot(&ratio(v, wh, floor));
    let den = w.sum_axis(Axis(0));
    ndarray::Zip::from(h.rows_mut())
        .and(num.rows())
        .and(&den)
        .for_each(|mut hk, nk, &d| {
            hk.zip_mut_with(&nk, |x, &n| *x = (*x * n / d).max(floor));
        });
}

fn update_dictionary(v: ArrayView2<f64>, w: &mut Array2<f64>, h: &Array2<f64>, wh: &Array2<f64>, floor: f64) {
    let num = ratio(v, wh, floor).dot(&h.t());
    let den = h.sum_axis(Axis(1));
    ndarray::Zip::from(w.rows_mut()).and(num.rows()).for_each(|mut wr, nr| {
        ndarray::Zip::from(&mut wr)
            .and(&nr)
            .and(&den)
            .for_each(|x, &n, &d| *x = (*x * n / d).max(floor));
    });
}

/// Options for [`factorize`].
#[derive(Debug, Clone, Copy)]
pub struct UpdateOptions {
    pub iters: usize,
    pub floor: f64,
    /// When false only `H` is updated (inference against a frozen dictionary).
    pub update_dictionary: bool,
    /// Record the divergence before the first and after every iteration.
    pub track_objective: bool,
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    /// Divergence at iteration 0 (the initial point) and after each
    /// iteration, when tracking was requested.
    pub objective: Vec<f64>,
}

impl Factorization {
    pub fn divergence(&self, v: ArrayView2<f64>, floor: f64) -> f64 {
        generalized_kl(v, self.w.dot(&self.h).view(), floor)
    }
}

/// Runs multiplicative KL updates from `(w, h)`. Each iteration updates `H`
/// and then, if enabled, `W`.
pub fn factorize(v: ArrayView2<f64>, mut w: Array2<f64>, mut h: Array2<f64>, opts: UpdateOptions) -> Factorization {
    let floor = opts.floor;
    let mut objective = Vec::new();
    let mut wh = w.dot(&h);
    if opts.track_objective {
        objective.push(generalized_kl(v, wh.view(), floor));
    }
    for _ in 0..opts.iters {
        update_activations(v, &w, &mut h, &wh, floor);
        wh = w.dot(&h);
        if opts.update_dictionary {
            update_dictionary(v, &mut w, &h, &wh, floor);
            wh = w.dot(&h);
        }
        if opts.track_objective {
            objective.push(generalized_kl(v, wh.view(), floor));
        }
    }
    Factorization { w, h, objective }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, floor: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(floor..1.0))
}

/// Where a model came from; checked before applying it to new data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub hac: Option<HacConfig>,
    /// Digest of the alphabet, slot schema and task inventory the model was
    /// trained against. Empty when unknown.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmfModel {
    /// D×K semantic dictionary `W_s`.
    pub semantic: Array2<f64>,
    /// A×K acoustic dictionary `W_a`.
    pub acoustic: Array2<f64>,
    pub config: NmfConfig,
    pub provenance: Provenance,
}

/// Inferred activations of one test utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub values: Vec<f64>,
    /// Set when the utterance's HAC was all zero.
    pub degenerate: bool,
}

fn stack_training_matrix(pairs: &[(SemanticVector, HacVector)], beta: f64) -> Result<(Array2<f64>, usize, HacConfig)> {
    let (first_sem, first_hac) = pairs.first().ok_or(NmfError::NoTrainingData)?;
    let d = first_sem.len();
    let a = first_hac.len();
    let mut v = Array2::zeros((d + a, pairs.len()));
    for (n, (sem, hac)) in pairs.iter().enumerate() {
        if sem.len() != d {
            return Err(NmfError::Dimension {
                what: "semantic vector length",
                expected: d,
                found: sem.len(),
            });
        }
        if hac.len() != a {
            return Err(NmfError::Dimension {
                what: "HAC vector length",
                expected: a,
                found: hac.len(),
            });
        }
        if hac.config() != first_hac.config() {
            return Err(NmfError::MixedDelays(first_hac.config().to_string(), hac.config().to_string()));
        }
        let mut col = v.column_mut(n);
        for (k, x) in sem.to_f64().into_iter().enumerate() {
            col[k] = beta * x;
        }
        let total: f64 = hac.values().iter().sum();
        let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
        for (k, x) in hac.values().iter().enumerate() {
            col[d + k] = x * scale;
        }
    }
    Ok((v, d, first_hac.config().clone()))
}

/// Trains a model and returns the divergence trace of the winning restart.
pub fn nmf_train_traced(pairs: &[(SemanticVector, HacVector)], cfg: &NmfConfig) -> Result<(NmfModel, Vec<f64>)> {
    train_impl(pairs, cfg, true)
}

pub fn nmf_train(pairs: &[(SemanticVector, HacVector)], cfg: &NmfConfig) -> Result<NmfModel> {
    train_impl(pairs, cfg, false).map(|(m, _)| m)
}

fn train_impl(pairs: &[(SemanticVector, HacVector)], cfg: &NmfConfig, track: bool) -> Result<(NmfModel, Vec<f64>)> {
    cfg.validate()?;
    let (v, d, hac) = stack_training_matrix(pairs, cfg.semantic_weight)?;
    let k = cfg.rank_for(d);
    let n = pairs.len();
    if k > n {
        log::warn!("NMF rank {k} exceeds the {n} training utterances (over-parameterized)");
    }
    let opts = UpdateOptions {
        iters: cfg.train_iters,
        floor: cfg.floor,
        update_dictionary: true,
        track_objective: track,
    };
    let mut best: Option<(f64, Factorization)> = None;
    for restart in 0..cfg.restarts {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[restart as u64]));
        let w0 = uniform_matrix(v.nrows(), k, cfg.floor, &mut rng);
        let h0 = uniform_matrix(k, n, cfg.floor, &mut rng);
        let f = factorize(v.view(), w0, h0, opts);
        let score = match f.objective.last() {
            Some(&o) => o,
            None => f.divergence(v.view(), cfg.floor),
        };
        if !score.is_finite() {
            return Err(NmfError::NonFinite);
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, f));
        }
    }
    let (_, Factorization { mut w, mut h, objective }) = best.expect("restarts >= 1");

    // Unit-sum columns; the scale moves into H so WH is unchanged.
    for (mut col, mut row) in w.columns_mut().into_iter().zip(h.rows_mut()) {
        let total = col.sum();
        col /= total;
        row *= total;
    }
    let model = NmfModel {
        semantic: w.slice(s![..d, ..]).to_owned(),
        acoustic: w.slice(s![d.., ..]).to_owned(),
        config: cfg.clone(),
        provenance: Provenance {
            hac: Some(hac),
            digest: String::new(),
        },
    };
    Ok((model, objective))
}

impl NmfModel {
    pub fn rank(&self) -> usize {
        self.semantic.ncols()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn acoustic_dim(&self) -> usize {
        self.acoustic.nrows()
    }

    fn initial_activation(&self) -> Array1<f64> {
        let mut rng = seed::rng(seed::derive(self.config.seed, &[INFER_STREAM]));
        Array1::from_shape_simple_fn(self.rank(), || rng.random_range(self.config.floor..1.0))
    }

    fn test_matrix(&self, tests: &[&HacVector]) -> Result<Array2<f64>> {
        let mut v = Array2::zeros((self.acoustic_dim(), tests.len()));
        for (n, hac) in tests.iter().enumerate() {
            if hac.len() != self.acoustic_dim() {
                return Err(NmfError::Dimension {
                    what: "HAC vector length",
                    expected: self.acoustic_dim(),
                    found: hac.len(),
                });
            }
            if let Some(cfg) = &self.provenance.hac {
                if hac.config() != cfg {
                    return Err(NmfError::MixedDelays(cfg.to_string(), hac.config().to_string()));
                }
            }
            let total: f64 = hac.values().iter().sum();
            if total > 0.0 {
                for (dst, x) in v.column_mut(n).iter_mut().zip(hac.values()) {
                    *dst = x / total;
                }
            }
        }
        Ok(v)
    }

    /// Infers activations for several utterances at once. Columns are
    /// independent, so this equals calling [`Self::infer`] per utterance.
    pub fn infer_batch(&self, tests: &[&HacVector]) -> Result<Vec<Activation>> {
        Ok(self.infer_impl(tests, false)?.0)
    }

    pub fn infer(&self, test: &HacVector) -> Result<Activation> {
        Ok(self.infer_impl(&[test], false)?.0.remove(0))
    }

    /// Like [`Self::infer`] but also returns the divergence trace.
    pub fn infer_traced(&self, test: &HacVector) -> Result<(Activation, Vec<f64>)> {
        let (mut acts, trace) = self.infer_impl(&[test], true)?;
        Ok((acts.remove(0), trace))
    }

    fn infer_impl(&self, tests: &[&HacVector], track: bool) -> Result<(Vec<Activation>, Vec<f64>)> {
        let v = self.test_matrix(tests)?;
        let h0 = self.initial_activation();
        let mut h = Array2::zeros((self.rank(), tests.len()));
        for mut col in h.columns_mut() {
            col.assign(&h0);
        }
        let f = factorize(
            v.view(),
            self.acoustic.clone(),
            h,
            UpdateOptions {
                iters: self.config.infer_iters,
                floor: self.config.floor,
                update_dictionary: false,
                track_objective: track,
            },
        );
        if f.h.iter().any(|x| !x.is_finite()) {
            return Err(NmfError::NonFinite);
        }
        let acts = tests
            .iter()
            .zip(f.h.columns())
            .map(|(hac, col)| {
                let degenerate = hac.is_zero();
                if degenerate {
                    log::warn!("all-zero HAC at inference; activations stay at the floor");
                }
                Activation {
                    values: col.to_vec(),
                    degenerate,
                }
            })
            .collect();
        Ok((acts, f.objective))
    }

    /// Semantic reconstruction `W_s·h`.
    pub fn predict(&self, activation: &[f64]) -> Result<Vec<f64>> {
        if activation.len() != self.rank() {
            return Err(NmfError::Dimension {
                what: "activation length",
                expected: self.rank(),
                found: activation.len(),
            });
        }
        Ok(self.semantic.dot(&Array1::from(activation.to_vec())).to_vec())
    }

    /// Text serialisation: `NMF D A K beta` header, metadata lines, then the
    /// rows of `W_s` followed by the rows of `W_a`.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "NMF {} {} {} {}",
            self.semantic_dim(),
            self.acoustic_dim(),
            self.rank(),
            c.semantic_weight
        );
        let delays = self
            .provenance
            .hac
            .as_ref()
            .map(|h| h.delays().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let _ = writeln!(out, "delays {delays}");
        let digest = if self.provenance.digest.is_empty() {
            "-"
        } else {
            &self.provenance.digest
        };
        let _ = writeln!(out, "digest {digest}");
        let _ = writeln!(
            out,
            "config {} {} {} {} {}",
            c.train_iters, c.infer_iters, c.floor, c.restarts, c.seed
        );
        for row in self.semantic.rows().into_iter().chain(self.acoustic.rows()) {
            out.push_str(&textio::join_row(row.iter()));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fmt_err = |m: &str| NmfError::Format(m.to_string());
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| fmt_err(&format!("missing {what}")));

        let header: Vec<&str> = next("header")?.split_ascii_whitespace().collect();
        if header.len() != 5 || header[0] != "NMF" {
            return Err(fmt_err("expected `NMF D A K beta` header"));
        }
        let dims: Vec<usize> = header[1..4]
            .iter()
            .map(|x| x.parse().map_err(|_| fmt_err("bad dimension in header")))
            .collect::<Result<_>>()?;
        let (d, a, k) = (dims[0], dims[1], dims[2]);
        let beta: f64 = header[4].parse().map_err(|_| fmt_err("bad beta"))?;

        let delays_line = next("delays line")?;
        let delays = delays_line
            .strip_prefix("delays")
            .ok_or_else(|| fmt_err("expected `delays` line"))?;
        let delays: Vec<usize> = delays
            .split_ascii_whitespace()
            .map(|x| x.parse().map_err(|_| fmt_err("bad delay")))
            .collect::<Result<_>>()?;
        let hac = if delays.is_empty() {
            None
        } else {
            Some(HacConfig::new(delays).map_err(|e| NmfError::Format(e.to_string()))?)
        };
        let digest = next("digest line")?
            .strip_prefix("digest ")
            .ok_or_else(|| fmt_err("expected `digest` line"))?
            .trim();
        let digest = if digest == "-" { String::new() } else { digest.to_string() };
        let cfg_fields: Vec<&str> = next("config line")?
            .strip_prefix("config ")
            .ok_or_else(|| fmt_err("expected `config` line"))?
            .split_ascii_whitespace()
            .collect();
        if cfg_fields.len() != 5 {
            return Err(fmt_err("config line needs 5 fields"));
        }
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| fmt_err("bad config value"));
        let config = NmfConfig {
            rank: Some(k),
            train_iters: parse_usize(cfg_fields[0])?,
            infer_iters: parse_usize(cfg_fields[1])?,
            floor: cfg_fields[2].parse().map_err(|_| fmt_err("bad floor"))?,
            semantic_weight: beta,
            restarts: parse_usize(cfg_fields[3])?,
            seed: cfg_fields[4].parse().map_err(|_| fmt_err("bad seed"))?,
        };
        config.validate()?;

        let mut read_matrix = |rows: usize| -> Result<Array2<f64>> {
            let mut m = Array2::zeros((rows, k));
            for r in 0..rows {
                let line = lines.next().ok_or_else(|| fmt_err("too few dictionary rows"))?;
                let vals = textio::parse_row(line).map_err(|e| NmfError::Format(e.to_string()))?;
                if vals.len() != k {
                    return Err(NmfError::Format(format!("row with {} values, expected {k}", vals.len())));
                }
                if vals.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(fmt_err("dictionary entries must be finite and nonnegative"));
                }
                m.row_mut(r).assign(&Array1::from(vals));
            }
            Ok(m)
        };
        let semantic = read_matrix(d)?;
        let acoustic = read_matrix(a)?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(fmt_err("trailing data after dictionary rows"));
        }
        Ok(NmfModel {
            semantic,
            acoustic,
            config,
            provenance: Provenance { hac, digest },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_atomic(path, self.to_text().as_bytes()).map_err(|source| NmfError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| NmfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_problem(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(0.0..1.0))
    }

    fn is_non_increasing(trace: &[f64], slack: f64) -> bool {
        trace.windows(2).all(|w| w[1] <= w[0] + slack * w[0].abs().max(1e-300))
    }

    #[test]
    fn divergence_of_exact_reconstruction_is_zero() {
        let v = array![[1.0, 0.5], [2.0, 3.0]];
        assert_eq!(generalized_kl(v.view(), v.view(), 1e-12), 0.0);
        // Σ V ln(V/WH) − V + WH on a hand-computed 1×2 case
        let d = generalized_kl(array![[1.0, 0.0]].view(), array![[2.0, 0.5]].view(), 1e-12);
        assert!((d - ((0.5f64).ln() - 1.0 + 2.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn exact_factorization_is_a_fixed_point() {
        let w0 = array![[0.5, 0.1], [0.2, 0.6], [0.3, 0.3]];
        let h0 = array![[1.0, 2.0, 0.5], [0.3, 0.7, 1.5]];
        let v = w0.dot(&h0);
        let f = factorize(
            v.view(),
            w0.clone(),
            h0.clone(),
            UpdateOptions {
                iters: 50,
                floor: 1e-12,
                update_dictionary: true,
                track_objective: true,
            },
        );
        assert!(f.objective.iter().all(|&o| o.abs() < 1e-12), "{:?}", &f.objective[..5]);
    }

    #[test]
    fn training_objective_is_monotone() {
        let v = random_problem(20, 10, 11);
        let mut rng = seed::rng(12);
        let f = factorize(
            v.view(),
            uniform_matrix(20, 4, 1e-12, &mut rng),
            uniform_matrix(4, 10, 1e-12, &mut rng),
            UpdateOptions {
                iters: 200,
                floor: 1e-12,
                update_dictionary: true,
                track_objective: true,
            },
        );
        assert_eq!(f.objective.len(), 201);
        assert!(is_non_increasing(&f.objective, 1e-8));
        assert!(f.objective[200] < f.objective[0]);
        assert!(f.w.iter().chain(f.h.iter()).all(|&x| x >= 1e-12));
    }

    #[test]
    fn config_validation() {
        let ok = NmfConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.rank_for(14), 19);
        for bad in [
            NmfConfig { rank: Some(0), ..ok.clone() },
            NmfConfig { train_iters: 0, ..ok.clone() },
            NmfConfig { floor: 0.0, ..ok.clone() },
            NmfConfig { semantic_weight: -1.0, ..ok.clone() },
            NmfConfig { restarts: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
