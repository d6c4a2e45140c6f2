//! Utterance-level features: HAC embeddings of posteriorgrams and many-hot
//! semantic encodings of task labels.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::s;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::posteriorgram::Posteriorgram;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid HAC delays: {0}")]
    InvalidDelays(String),
    #[error("invalid slot schema: {0}")]
    InvalidSchema(String),
    #[error("slot {slot:?} has no value {value:?}")]
    UnknownValue { slot: String, value: String },
    #[error("slot {0:?} is not part of the schema")]
    UnknownSlot(String),
    #[error("slot {0:?} is not assigned")]
    MissingSlot(String),
    #[error("expected a vector of length {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("no candidate tasks to decode against")]
    NoCandidates,
}

type Result<T> = std::result::Result<T, FeatureError>;

/// Frame delays at which co-occurrences are counted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct HacConfig {
    delays: Vec<usize>,
}

impl HacConfig {
    pub fn new(delays: Vec<usize>) -> Result<Self> {
        if delays.is_empty() {
            return Err(FeatureError::InvalidDelays("empty delay list".into()));
        }
        if delays[0] == 0 {
            return Err(FeatureError::InvalidDelays("delays must be >= 1".into()));
        }
        if delays.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FeatureError::InvalidDelays(format!(
                "delays must be strictly increasing, got {delays:?}"
            )));
        }
        Ok(HacConfig { delays })
    }

    pub fn delays(&self) -> &[usize] {
        &self.delays
    }

    /// Length of the HAC vector for an alphabet of `num_symbols` characters.
    pub fn dim(&self, num_symbols: usize) -> usize {
        self.delays.len() * num_symbols * num_symbols
    }
}

impl Default for HacConfig {
    fn default() -> Self {
        HacConfig {
            delays: vec![1, 2, 3, 5],
        }
    }
}

impl TryFrom<Vec<usize>> for HacConfig {
    type Error = FeatureError;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        HacConfig::new(v)
    }
}

impl From<HacConfig> for Vec<usize> {
    fn from(c: HacConfig) -> Self {
        c.delays
    }
}

impl fmt::Display for HacConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.delays.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for HacConfig {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        let delays = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| FeatureError::InvalidDelays(format!("cannot parse {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        HacConfig::new(delays)
    }
}

/// Histogram of acoustic co-occurrences: one C×C block per delay, stored
/// row-major as `(event at t, event at t+d)`, blocks in delay order.
#[derive(Debug, Clone, PartialEq)]
pub struct HacVector {
    values: Vec<f64>,
    config: HacConfig,
    num_symbols: usize,
}

impl HacVector {
    /// Wraps precomputed values, e.g. co-occurrence counts from another
    /// front end. Values must be finite and nonnegative.
    pub fn from_values(values: Vec<f64>, config: HacConfig, num_symbols: usize) -> Result<Self> {
        let expected = config.dim(num_symbols);
        if values.len() != expected {
            return Err(FeatureError::Dimension {
                expected,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(FeatureError::InvalidDelays(
                "HAC values must be finite and nonnegative".into(),
            ));
        }
        Ok(HacVector {
            values,
            config,
            num_symbols,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn config(&self) -> &HacConfig {
        &self.config
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    /// True when no frame pair was counted (utterance shorter than every delay).
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// The C×C block for the `k`-th delay.
    pub fn block(&self, k: usize) -> &[f64] {
        let n = self.num_symbols * self.num_symbols;
        &self.values[k * n..(k + 1) * n]
    }

    pub fn scaled(&self, factor: f64) -> HacVector {
        HacVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Sums the outer products `p_t ⊗ p_{t+d}` over all frame pairs, for every
/// configured delay `d`.
pub fn hac_encode(pg: &Posteriorgram, cfg: &HacConfig) -> HacVector {
    let probs = pg.probabilities();
    let (t, c) = probs.dim();
    let mut values = Vec::with_capacity(cfg.dim(c));
    for &d in cfg.delays() {
        if t > d {
            let block = probs.slice(s![..t - d, ..]).t().dot(&probs.slice(s![d.., ..]));
            values.extend(block.iter());
        } else {
            values.extend(std::iter::repeat_n(0.0, c * c));
        }
    }
    let hac = HacVector {
        values,
        config: cfg.clone(),
        num_symbols: c,
    };
    if hac.is_zero() {
        log::warn!("utterance of {t} frames is too short for delays [{cfg}]; HAC is all zero");
    }
    hac
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

/// Ordered slots with ordered value inventories. Each (slot, value) pair owns
/// one position of the semantic vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Slot>", into = "Vec<Slot>")]
pub struct SlotSchema {
    slots: Vec<Slot>,
}

impl TryFrom<Vec<Slot>> for SlotSchema {
    type Error = FeatureError;

    fn try_from(slots: Vec<Slot>) -> Result<Self> {
        SlotSchema::new(slots)
    }
}

impl From<SlotSchema> for Vec<Slot> {
    fn from(s: SlotSchema) -> Self {
        s.slots
    }
}

impl SlotSchema {
    pub fn new(slots: Vec<Slot>) -> Result<Self> {
        if slots.iter().all(|s| s.values.is_empty()) {
            return Err(FeatureError::InvalidSchema("schema has no values".into()));
        }
        for (k, slot) in slots.iter().enumerate() {
            if slots[..k].iter().any(|o| o.name == slot.name) {
                return Err(FeatureError::InvalidSchema(format!(
                    "slot {:?} declared twice",
                    slot.name
                )));
            }
            if slot.values.is_empty() {
                return Err(FeatureError::InvalidSchema(format!("slot {:?} has no values", slot.name)));
            }
            for (j, v) in slot.values.iter().enumerate() {
                if slot.values[..j].contains(v) {
                    return Err(FeatureError::InvalidSchema(format!(
                        "slot {:?} lists value {v:?} twice",
                        slot.name
                    )));
                }
            }
        }
        Ok(SlotSchema { slots })
    }

    /// Convenience constructor from `(name, [values])` pairs.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, Vec<&'a str>)>) -> Result<Self> {
        SlotSchema::new(
            pairs
                .into_iter()
                .map(|(name, values)| Slot {
                    name: name.to_string(),
                    values: values.into_iter().map(String::from).collect(),
                })
                .collect(),
        )
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Total number of (slot, value) pairs.
    pub fn dim(&self) -> usize {
        self.slots.iter().map(|s| s.values.len()).sum()
    }

    /// Position of `(slot, value)` in the semantic vector.
    pub fn position(&self, slot: &str, value: &str) -> Result<usize> {
        let mut offset = 0;
        for s in &self.slots {
            if s.name == slot {
                return s
                    .values
                    .iter()
                    .position(|v| v == value)
                    .map(|k| offset + k)
                    .ok_or_else(|| FeatureError::UnknownValue {
                        slot: slot.to_string(),
                        value: value.to_string(),
                    });
            }
            offset += s.values.len();
        }
        Err(FeatureError::UnknownSlot(slot.to_string()))
    }
}

/// A full intent: every slot of the schema mapped to one of its values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskLabel {
    pub assignments: BTreeMap<String, String>,
}

impl TaskLabel {
    pub fn new<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        TaskLabel {
            assignments: pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.assignments.get(slot).map(String::as_str)
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join("|"))
    }
}

/// Binary many-hot intent encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticVector {
    bits: Vec<bool>,
}

impl SemanticVector {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

pub fn encode_semantics(label: &TaskLabel, schema: &SlotSchema) -> Result<SemanticVector> {
    let mut bits = vec![false; schema.dim()];
    for slot in label.assignments.keys() {
        if !schema.slots.iter().any(|s| &s.name == slot) {
            return Err(FeatureError::UnknownSlot(slot.clone()));
        }
    }
    for slot in &schema.slots {
        let value = label
            .get(&slot.name)
            .ok_or_else(|| FeatureError::MissingSlot(slot.name.clone()))?;
        bits[schema.position(&slot.name, value)?] = true;
    }
    Ok(SemanticVector { bits })
}

/// Outcome of closed-set decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    /// Index into the candidate list.
    pub index: usize,
    /// Cosine similarity of the winning candidate.
    pub score: f64,
    /// Set when the prediction was all zero and `index` is a fallback.
    pub degenerate: bool,
}

/// Pre-encoded task inventory for repeated closed-set decoding.
#[derive(Debug, Clone)]
pub struct SemanticCodebook {
    encodings: Vec<Vec<f64>>,
    norms: Vec<f64>,
    dim: usize,
}

impl SemanticCodebook {
    pub fn new(schema: &SlotSchema, candidates: &[TaskLabel]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(FeatureError::NoCandidates);
        }
        let encodings = candidates
            .iter()
            .map(|c| encode_semantics(c, schema).map(|v| v.to_f64()))
            .collect::<Result<Vec<_>>>()?;
        let norms = encodings
            .iter()
            .map(|e| e.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(SemanticCodebook {
            encodings,
            norms,
            dim: schema.dim(),
        })
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    /// Cosine-similarity argmax; ties go to the lowest index.
    pub fn decode(&self, prediction: &[f64]) -> Result<Decision> {
        if prediction.len() != self.dim {
            return Err(FeatureError::Dimension {
                expected: self.dim,
                found: prediction.len(),
            });
        }
        let norm = prediction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            log::warn!("degenerate semantic prediction (norm {norm}); falling back to candidate 0");
            return Ok(Decision {
                index: 0,
                score: 0.0,
                degenerate: true,
            });
        }
        let mut best = Decision {
            index: 0,
            score: f64::NEG_INFINITY,
            degenerate: false,
        };
        for (k, (enc, enc_norm)) in self.encodings.iter().zip(&self.norms).enumerate() {
            let dot: f64 = enc.iter().zip(prediction).map(|(a, b)| a * b).sum();
            let score = dot / (norm * enc_norm);
            if score > best.score {
                best = Decision {
                    index: k,
                    score,
                    degenerate: false,
                };
            }
        }
        Ok(best)
    }
}

pub fn decode_semantics(
    prediction: &[f64],
    schema: &SlotSchema,
    candidates: &[TaskLabel],
) -> Result<Decision> {
    SemanticCodebook::new(schema, candidates)?.decode(prediction)
}
