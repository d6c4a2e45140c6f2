//! Character posteriorgrams: the per-frame log-probability matrices both
//! decoders consume, a seeded synthesiser that produces them from
//! transcripts, and a plain-text file format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::seed;
use crate::textio;

/// Probabilities are clamped to at least this value before taking logs so
/// that every stored entry is finite.
pub const PROB_FLOOR: f64 = 1e-8;

/// 40 ms per frame: HAC delay `d` then spans `40·d` ms.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.040;

const LSE_TOLERANCE: f64 = 1e-5;
const FILE_LSE_TOLERANCE: f64 = 1e-4;
const CONFUSION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PosteriorgramError {
    #[error("alphabet needs at least 2 symbols, got {0}")]
    AlphabetTooSmall(usize),
    #[error("alphabet symbol {0:?} appears more than once")]
    DuplicateSymbol(char),
    #[error("silence symbol {0:?} is not in the alphabet")]
    MissingSilence(char),
    #[error("transcript is empty")]
    EmptyTranscript,
    #[error("symbol {symbol:?} at position {position} is not in the alphabet")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("invalid posteriorgram: {0}")]
    Invalid(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("row count mismatch: header declares {declared} rows, found {found}")]
    RowCount { declared: usize, found: usize },
    #[error("row {row} has {found} values, expected {expected}")]
    ColumnCount { row: usize, expected: usize, found: usize },
    #[error("row {row} is not normalized: log-sum-exp = {log_sum_exp}")]
    NotNormalized { row: usize, log_sum_exp: f64 },
    #[error("unparsable value on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PosteriorgramError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PosteriorgramError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PosteriorgramError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, PosteriorgramError>;

/// Ordered set of character symbols emitted by the acoustic model. One of
/// them stands for silence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AlphabetRepr", into = "AlphabetRepr")]
pub struct CharacterAlphabet {
    symbols: Vec<char>,
    silence: usize,
}

#[derive(Serialize, Deserialize)]
struct AlphabetRepr {
    symbols: String,
    silence: char,
}

impl TryFrom<AlphabetRepr> for CharacterAlphabet {
    type Error = PosteriorgramError;

    fn try_from(r: AlphabetRepr) -> Result<Self> {
        CharacterAlphabet::new(r.symbols.chars(), r.silence)
    }
}

impl From<CharacterAlphabet> for AlphabetRepr {
    fn from(a: CharacterAlphabet) -> Self {
        AlphabetRepr {
            silence: a.silence_symbol(),
            symbols: a.symbols.into_iter().collect(),
        }
    }
}

impl CharacterAlphabet {
    pub fn new(symbols: impl IntoIterator<Item = char>, silence: char) -> Result<Self> {
        let symbols: Vec<char> = symbols.into_iter().collect();
        if symbols.len() < 2 {
            return Err(PosteriorgramError::AlphabetTooSmall(symbols.len()));
        }
        for (k, c) in symbols.iter().enumerate() {
            if symbols[..k].contains(c) {
                return Err(PosteriorgramError::DuplicateSymbol(*c));
            }
        }
        let silence = symbols
            .iter()
            .position(|&c| c == silence)
            .ok_or(PosteriorgramError::MissingSilence(silence))?;
        Ok(CharacterAlphabet { symbols, silence })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn silence_index(&self) -> usize {
        self.silence
    }

    pub fn silence_symbol(&self) -> char {
        self.symbols[self.silence]
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }
}

/// T×C matrix of natural-log character probabilities, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriorgram {
    frames: Array2<f64>,
    frame_period: f64,
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl Posteriorgram {
    /// Wraps a matrix of log-probabilities. Rows must already log-sum-exp to
    /// zero within 1e-5; they are re-centred exactly.
    pub fn from_log_probs(frames: Array2<f64>, frame_period: f64) -> Result<Self> {
        Self::normalized(frames, frame_period, LSE_TOLERANCE)
    }

    /// Builds a posteriorgram from per-frame probability rows. Each row is
    /// floored at [`PROB_FLOOR`] and renormalised before taking logs.
    pub fn from_probabilities(probs: &Array2<f64>, frame_period: f64) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(PosteriorgramError::Invalid(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let mut frames = probs.mapv(|p| p.max(PROB_FLOOR));
        for mut row in frames.rows_mut() {
            let total = row.sum();
            row.mapv_inplace(|p| (p / total).ln());
        }
        Self::normalized(frames, frame_period, LSE_TOLERANCE)
    }

    fn normalized(mut frames: Array2<f64>, frame_period: f64, tol: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(PosteriorgramError::Invalid("no frames".into()));
        }
        if frames.ncols() < 2 {
            return Err(PosteriorgramError::Invalid(format!(
                "{} columns; need at least 2",
                frames.ncols()
            )));
        }
        if !(frame_period.is_finite() && frame_period > 0.0) {
            return Err(PosteriorgramError::Invalid(format!(
                "frame period {frame_period} must be positive"
            )));
        }
        if let Some(bad) = frames.iter().find(|x| !x.is_finite()) {
            return Err(PosteriorgramError::Invalid(format!("non-finite entry {bad}")));
        }
        for (row, mut values) in frames.rows_mut().into_iter().enumerate() {
            let lse = log_sum_exp(values.view());
            if (lse.abs()).partial_cmp(&tol) != Some(std::cmp::Ordering::Less) {
                return Err(PosteriorgramError::NotNormalized {
                    row,
                    log_sum_exp: lse,
                });
            }
            values.mapv_inplace(|x| x - lse);
        }
        Ok(Posteriorgram {
            frames,
            frame_period,
        })
    }

    /// The same frames in the order given by `order`, which must be a
    /// permutation of `0..T`. Rows are copied unchanged.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_frames()];
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(PosteriorgramError::Invalid(format!("{order:?} is not a frame permutation")));
            }
        }
        if order.len() != seen.len() {
            return Err(PosteriorgramError::Invalid(format!("{order:?} is not a frame permutation")));
        }
        Ok(Posteriorgram {
            frames: self.frames.select(ndarray::Axis(0), order),
            frame_period: self.frame_period,
        })
    }

    /// Log-probability matrix (T×C).
    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    /// Probability matrix (T×C), `exp` of [`Self::frames`].
    pub fn probabilities(&self) -> Array2<f64> {
        self.frames.mapv(f64::exp)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_symbols(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_period(&self) -> f64 {
        self.frame_period
    }

    /// Renders the text format: a `T C frame_period` header followed by T
    /// rows of C log-probabilities.
    pub fn to_text(&self) -> String {
        let (t, c) = self.frames.dim();
        let mut out = String::with_capacity(t * c * 24 + 32);
        let _ = writeln!(out, "{t} {c} {}", self.frame_period);
        for row in self.frames.rows() {
            out.push_str(&textio::join_row(row.iter()));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| PosteriorgramError::MalformedHeader("empty file".into()))?;
        let fields: Vec<&str> = header.split_ascii_whitespace().collect();
        if fields.len() != 3 {
            return Err(PosteriorgramError::MalformedHeader(format!(
                "expected `T C frame_period`, got {header:?}"
            )));
        }
        let bad_header = |what: &str| PosteriorgramError::MalformedHeader(format!("bad {what} in {header:?}"));
        let t: usize = fields[0].parse().map_err(|_| bad_header("T"))?;
        let c: usize = fields[1].parse().map_err(|_| bad_header("C"))?;
        let period: f64 = fields[2].parse().map_err(|_| bad_header("frame_period"))?;
        if t == 0 || c < 2 || !(period.is_finite() && period > 0.0) {
            return Err(bad_header("dimensions"));
        }

        let mut frames = Array2::zeros((t, c));
        let mut found = 0;
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if found == t {
                found += 1;
                continue;
            }
            let values = textio::parse_row(line).map_err(|e| PosteriorgramError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if values.len() != c {
                return Err(PosteriorgramError::ColumnCount {
                    row: found,
                    expected: c,
                    found: values.len(),
                });
            }
            frames.row_mut(found).assign(&Array1::from(values));
            found += 1;
        }
        if found != t {
            return Err(PosteriorgramError::RowCount { declared: t, found });
        }
        Self::normalized(frames, period, FILE_LSE_TOLERANCE)
    }
}

pub fn save_posteriorgram(pg: &Posteriorgram, path: &Path) -> Result<()> {
    textio::write_atomic(path, pg.to_text().as_bytes()).map_err(|e| PosteriorgramError::io(path, e))
}

pub fn load_posteriorgram(path: &Path) -> Result<Posteriorgram> {
    let text = fs::read_to_string(path).map_err(|e| PosteriorgramError::io(path, e))?;
    Posteriorgram::from_text(&text)
}

/// Row-stochastic C×C matrix: row `c` says where the probability mass
/// diverted away from true character `c` ends up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    rows: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = ConfusionMatrix { rows };
        m.validate()?;
        Ok(m)
    }

    /// Diverted mass spread evenly over the other characters.
    pub fn uniform(size: usize) -> Self {
        let rows = (0..size)
            .map(|i| {
                (0..size)
                    .map(|j| if i == j { 0.0 } else { 1.0 / (size - 1) as f64 })
                    .collect()
            })
            .collect();
        ConfusionMatrix { rows }
    }

    /// Random confusions: each row is a Dirichlet draw over the other
    /// characters. Small `concentration` gives peaky rows, i.e. a few
    /// characters that are systematically confused with each other.
    pub fn random<R: Rng + ?Sized>(size: usize, concentration: f64, rng: &mut R) -> Self {
        let gamma = Gamma::new(concentration, 1.0).expect("concentration must be positive");
        let rows = (0..size)
            .map(|i| {
                let mut row: Vec<f64> = (0..size)
                    .map(|j| if i == j { 0.0 } else { gamma.sample(rng).max(1e-300) })
                    .collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= total);
                row
            })
            .collect();
        ConfusionMatrix { rows }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.rows[c]
    }

    fn validate(&self) -> Result<()> {
        let n = self.rows.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != n {
                return Err(PosteriorgramError::InvalidConfig(format!(
                    "confusion matrix row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(PosteriorgramError::InvalidConfig(format!(
                    "confusion matrix row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > CONFUSION_TOLERANCE {
                return Err(PosteriorgramError::InvalidConfig(format!(
                    "confusion matrix row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive integer range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub min: usize,
    pub max: usize,
}

impl FrameRange {
    pub const fn new(min: usize, max: usize) -> Self {
        FrameRange { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub frames_per_char: FrameRange,
    /// Probability mass ε moved away from the true character, in `[0, 1)`.
    pub confusion_noise: f64,
    /// Where the diverted mass goes; `None` means uniform over the other
    /// characters.
    pub confusion: Option<ConfusionMatrix>,
    pub leading_silence: FrameRange,
    pub trailing_silence: FrameRange,
    pub frame_period: f64,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            frames_per_char: FrameRange::new(1, 3),
            confusion_noise: 0.2,
            confusion: None,
            leading_silence: FrameRange::new(2, 6),
            trailing_silence: FrameRange::new(2, 6),
            frame_period: DEFAULT_FRAME_PERIOD,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let fpc = self.frames_per_char;
        if fpc.min == 0 || fpc.min > fpc.max {
            return Err(PosteriorgramError::InvalidConfig(format!(
                "frames_per_char range {}..={} must be positive and ordered",
                fpc.min, fpc.max
            )));
        }
        for (name, r) in [
            ("leading_silence", self.leading_silence),
            ("trailing_silence", self.trailing_silence),
        ] {
            if r.min > r.max {
                return Err(PosteriorgramError::InvalidConfig(format!(
                    "{name} range {}..={} is empty",
                    r.min, r.max
                )));
            }
        }
        if !(0.0..1.0).contains(&self.confusion_noise) {
            return Err(PosteriorgramError::InvalidConfig(format!(
                "confusion_noise out of range: {} (must be in [0, 1))",
                self.confusion_noise
            )));
        }
        if !(self.frame_period.is_finite() && self.frame_period > 0.0) {
            return Err(PosteriorgramError::InvalidConfig(format!(
                "frame_period {} must be positive",
                self.frame_period
            )));
        }
        if let Some(m) = &self.confusion {
            m.validate()?;
        }
        Ok(())
    }
}

/// Log-probability row for a frame whose true character is `truth`.
fn frame_distribution(truth: usize, noise: f64, confusion: &ConfusionMatrix) -> Array1<f64> {
    let mut p = Array1::from(confusion.row(truth).to_vec()) * noise;
    p[truth] += 1.0 - noise;
    p.mapv_inplace(|x| x.max(PROB_FLOOR));
    let total = p.sum();
    p.mapv(|x| (x / total).ln())
}

/// Synthesises the posteriorgram an acoustic model would emit for
/// `transcript`: silence padding, then each character held for a random
/// number of frames, each frame carrying `(1-ε)·onehot + ε·confusion_row`.
pub fn synthesize_posteriorgram(
    transcript: &str,
    alphabet: &CharacterAlphabet,
    cfg: &SynthesisConfig,
) -> Result<Posteriorgram> {
    cfg.validate()?;
    if transcript.is_empty() {
        return Err(PosteriorgramError::EmptyTranscript);
    }
    let symbols = transcript
        .chars()
        .enumerate()
        .map(|(position, symbol)| {
            alphabet
                .index_of(symbol)
                .ok_or(PosteriorgramError::UnknownSymbol { symbol, position })
        })
        .collect::<Result<Vec<_>>>()?;

    let confusion = match &cfg.confusion {
        Some(m) if m.size() != alphabet.len() => {
            return Err(PosteriorgramError::InvalidConfig(format!(
                "confusion matrix is {0}x{0} but the alphabet has {1} symbols",
                m.size(),
                alphabet.len()
            )))
        }
        Some(m) => m.clone(),
        None => ConfusionMatrix::uniform(alphabet.len()),
    };

    let mut rng = seed::rng(cfg.seed);
    let silence = alphabet.silence_index();
    let mut truth = vec![silence; cfg.leading_silence.sample(&mut rng)];
    for &s in &symbols {
        let n = cfg.frames_per_char.sample(&mut rng);
        truth.extend(std::iter::repeat_n(s, n));
    }
    let trailing = cfg.trailing_silence.sample(&mut rng);
    truth.extend(std::iter::repeat_n(silence, trailing));

    let rows: Vec<Array1<f64>> = (0..alphabet.len())
        .map(|c| frame_distribution(c, cfg.confusion_noise, &confusion))
        .collect();
    let mut frames = Array2::zeros((truth.len(), alphabet.len()));
    for (mut row, &c) in frames.axis_iter_mut(Axis(0)).zip(&truth) {
        row.assign(&rows[c]);
    }
    Posteriorgram::from_log_probs(frames, cfg.frame_period)
}
