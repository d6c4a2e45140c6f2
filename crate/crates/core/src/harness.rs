//! Synthetic command grammars, datasets of synthesised posteriorgrams, and
//! the learning-curve and HAC-delay ablation protocols.
//!
//! A learning curve is measured per speaker: the speaker's utterances are
//! shuffled and cut into `B` blocks, a decoder is trained on the first `m`
//! blocks and tested on the remaining ones, for `m = 1..B-1`. This is
//! repeated for every fold (an independent reshuffle) and the accuracies
//! are averaged over speakers and folds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capsule::{self, CapsuleConfig, CapsuleError, CapsuleModel};
use crate::error::ErrorKind;
use crate::features::{self, FeatureError, HacConfig, HacVector, SemanticCodebook, SlotSchema, TaskLabel};
use crate::nmf::{self, NmfConfig, NmfError, NmfModel};
use crate::posteriorgram::{
    self, CharacterAlphabet, ConfusionMatrix, Posteriorgram, PosteriorgramError, SynthesisConfig,
};
use crate::seed;
use crate::textio;

pub const MANIFEST_FILE: &str = "manifest.json";

const SILENCE: char = '#';

// Seed streams.
const STREAM_CONFUSION: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_UTTERANCE: u64 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid grammar: {0}")]
    InvalidGrammar(String),
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("speaker {speaker} has {found} utterances, at least {needed} needed")]
    InsufficientUtterances {
        speaker: String,
        found: usize,
        needed: usize,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("model does not match the dataset: {0}")]
    Incompatible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Posteriorgram(#[from] PosteriorgramError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Capsule(#[from] CapsuleError),
}

impl HarnessError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            HarnessError::Incompatible(_) => ErrorKind::Incompatible,
            HarnessError::Io { .. } => ErrorKind::Io,
            HarnessError::Posteriorgram(e) => e.kind(),
            HarnessError::Feature(_) => ErrorKind::Config,
            HarnessError::Nmf(e) => e.kind(),
            HarnessError::Capsule(e) => e.kind(),
            _ => ErrorKind::Config,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Grammars

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrammarKind {
    /// Word order carries no meaning (robot-style commands).
    OrderInsensitive,
    /// The same words in a different order mean a different task
    /// (card-move commands).
    OrderSensitive,
}

impl GrammarKind {
    /// Number of blocks a speaker's data is cut into for learning curves.
    pub fn default_blocks(self) -> usize {
        match self {
            GrammarKind::OrderInsensitive => 15,
            GrammarKind::OrderSensitive => 5,
        }
    }

    pub fn default_utterances(self) -> usize {
        match self {
            GrammarKind::OrderInsensitive => 150,
            GrammarKind::OrderSensitive => 100,
        }
    }
}

impl fmt::Display for GrammarKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrammarKind::OrderInsensitive => "order-insensitive",
            GrammarKind::OrderSensitive => "order-sensitive",
        })
    }
}

impl FromStr for GrammarKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "order-insensitive" | "order_insensitive" => Ok(GrammarKind::OrderInsensitive),
            "order-sensitive" | "order_sensitive" => Ok(GrammarKind::OrderSensitive),
            other => Err(HarnessError::InvalidGrammar(format!(
                "unknown grammar kind `{other}` (expected order-insensitive or order-sensitive)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateItem {
    /// A fixed carrier word.
    Word(String),
    /// The word of the task's value for this slot.
    Slot(String),
}

/// A command language over a slot schema with a closed task inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub kind: GrammarKind,
    pub schema: SlotSchema,
    /// slot → value → spoken word.
    pub lexicon: BTreeMap<String, BTreeMap<String, String>>,
    pub template: Vec<TemplateItem>,
    /// One filler is drawn per utterance and put in front; `""` means none.
    pub fillers: Vec<String>,
    pub tasks: Vec<TaskLabel>,
}

impl Grammar {
    pub fn new(
        kind: GrammarKind,
        schema: SlotSchema,
        lexicon: BTreeMap<String, BTreeMap<String, String>>,
        template: Vec<TemplateItem>,
        fillers: Vec<String>,
        tasks: Vec<TaskLabel>,
    ) -> Result<Self> {
        let g = Grammar {
            kind,
            schema,
            lexicon,
            template,
            fillers,
            tasks,
        };
        g.validate()?;
        Ok(g)
    }

    /// Robot commands: 11 directions × 3 speeds, spoken in either order.
    pub fn robot() -> Self {
        let directions = [
            "left", "right", "front", "back", "up", "down", "north", "south", "east", "west", "home",
        ];
        let speeds = ["slowly", "quickly", "normally"];
        let schema = SlotSchema::from_pairs([("direction", directions.to_vec()), ("speed", speeds.to_vec())])
            .expect("static schema");
        let lexicon = identity_lexicon(&schema);
        let tasks = directions
            .iter()
            .flat_map(|d| speeds.iter().map(move |s| TaskLabel::new([("direction", *d), ("speed", *s)])))
            .collect();
        Grammar::new(
            GrammarKind::OrderInsensitive,
            schema,
            lexicon,
            vec![
                TemplateItem::Word("go".into()),
                TemplateItem::Slot("direction".into()),
                TemplateItem::Slot("speed".into()),
            ],
            vec![String::new(), "robot".into(), "please".into()],
            tasks,
        )
        .expect("static grammar")
    }

    /// Card moves `put X on Y`: all 30 ordered pairs of six cards, plus the
    /// first four cards onto the pile or the free slot.
    pub fn cards() -> Self {
        let cards = ["ace", "king", "queen", "jack", "ten", "nine"];
        let mut targets = cards.to_vec();
        targets.extend(["pile", "slot"]);
        let schema =
            SlotSchema::from_pairs([("source", cards.to_vec()), ("target", targets)]).expect("static schema");
        let lexicon = identity_lexicon(&schema);
        let mut tasks = Vec::new();
        for a in cards {
            for b in cards {
                if a != b {
                    tasks.push(TaskLabel::new([("source", a), ("target", b)]));
                }
            }
        }
        for a in &cards[..4] {
            for place in ["pile", "slot"] {
                tasks.push(TaskLabel::new([("source", *a), ("target", place)]));
            }
        }
        Grammar::new(
            GrammarKind::OrderSensitive,
            schema,
            lexicon,
            vec![
                TemplateItem::Word("put".into()),
                TemplateItem::Slot("source".into()),
                TemplateItem::Word("on".into()),
                TemplateItem::Slot("target".into()),
            ],
            vec![String::new()],
            tasks,
        )
        .expect("static grammar")
    }

    /// Five one-word commands with no shared characters patterns between
    /// tasks beyond chance; linearly separable in HAC space.
    pub fn toy() -> Self {
        let actions = ["stop", "jump", "sing", "look", "wave"];
        let schema = SlotSchema::from_pairs([("action", actions.to_vec())]).expect("static schema");
        let lexicon = identity_lexicon(&schema);
        let tasks = actions.iter().map(|a| TaskLabel::new([("action", *a)])).collect();
        Grammar::new(
            GrammarKind::OrderInsensitive,
            schema,
            lexicon,
            vec![TemplateItem::Slot("action".into())],
            vec![String::new()],
            tasks,
        )
        .expect("static grammar")
    }

    pub fn default_for(kind: GrammarKind) -> Self {
        match kind {
            GrammarKind::OrderInsensitive => Grammar::robot(),
            GrammarKind::OrderSensitive => Grammar::cards(),
        }
    }

    fn word(&self, slot: &str, value: &str) -> Option<&str> {
        self.lexicon.get(slot)?.get(value).map(String::as_str)
    }

    /// Slot words of `task` in template order.
    fn slot_words(&self, task: &TaskLabel) -> Vec<&str> {
        self.template
            .iter()
            .filter_map(|item| match item {
                TemplateItem::Slot(slot) => task.get(slot).and_then(|v| self.word(slot, v)),
                TemplateItem::Word(_) => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::InvalidGrammar(m));
        if self.tasks.is_empty() {
            return bad("empty task inventory".into());
        }
        if self.fillers.is_empty() {
            return bad("filler list must not be empty (use \"\" for no filler)".into());
        }
        for slot in self.schema.slots() {
            for value in &slot.values {
                match self.word(&slot.name, value) {
                    Some(w) if is_word(w) => {}
                    Some(w) => return bad(format!("word `{w}` for {}={value} is not a plain word", slot.name)),
                    None => return bad(format!("no word for {}={value}", slot.name)),
                }
            }
            let uses = self
                .template
                .iter()
                .filter(|i| matches!(i, TemplateItem::Slot(s) if *s == slot.name))
                .count();
            if uses != 1 {
                return bad(format!("slot `{}` appears {uses} times in the template", slot.name));
            }
        }
        for item in &self.template {
            match item {
                TemplateItem::Word(w) if !is_word(w) => return bad(format!("template word `{w}` is not a plain word")),
                TemplateItem::Slot(s) if !self.schema.slots().iter().any(|x| x.name == *s) => {
                    return bad(format!("template slot `{s}` is not in the schema"))
                }
                _ => {}
            }
        }
        if let Some(f) = self.fillers.iter().find(|f| !f.is_empty() && !is_word(f)) {
            return bad(format!("filler `{f}` is not a plain word"));
        }
        let mut seen = HashSet::new();
        for task in &self.tasks {
            features::encode_semantics(task, &self.schema)?;
            if !seen.insert(task.to_string()) {
                return bad(format!("duplicate task {task}"));
            }
        }
        let mut by_sequence: HashMap<Vec<&str>, &TaskLabel> = HashMap::new();
        let mut by_multiset: HashMap<Vec<&str>, &TaskLabel> = HashMap::new();
        let mut shared_multiset = false;
        for task in &self.tasks {
            let seq = self.slot_words(task);
            if let Some(other) = by_sequence.insert(seq.clone(), task) {
                return bad(format!("tasks {other} and {task} are spoken identically"));
            }
            let mut bag = seq;
            bag.sort_unstable();
            if let Some(other) = by_multiset.insert(bag, task) {
                if self.kind == GrammarKind::OrderInsensitive {
                    return bad(format!("tasks {other} and {task} share a word multiset"));
                }
                shared_multiset = true;
            }
        }
        if self.kind == GrammarKind::OrderSensitive && !shared_multiset {
            return bad("order-sensitive grammar has no two tasks with the same word multiset".into());
        }
        Ok(())
    }

    /// Silence, space, then every letter the grammar can produce, sorted.
    pub fn alphabet(&self) -> CharacterAlphabet {
        let mut letters: Vec<char> = self
            .lexicon
            .values()
            .flat_map(|m| m.values())
            .chain(self.template.iter().filter_map(|i| match i {
                TemplateItem::Word(w) => Some(w),
                TemplateItem::Slot(_) => None,
            }))
            .chain(self.fillers.iter())
            .flat_map(|w| w.chars())
            .collect();
        letters.sort_unstable();
        letters.dedup();
        CharacterAlphabet::new([SILENCE, ' '].into_iter().chain(letters), SILENCE).expect("validated words")
    }

    /// Transcript of task `index`. Order-insensitive grammars put the slot
    /// words into the slot positions in random order.
    pub fn render<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> String {
        let task = &self.tasks[index];
        let mut slot_words = self.slot_words(task);
        if self.kind == GrammarKind::OrderInsensitive {
            slot_words.shuffle(rng);
        }
        let filler = self.fillers.choose(rng).expect("non-empty fillers");
        let mut words: Vec<&str> = Vec::new();
        if !filler.is_empty() {
            words.push(filler);
        }
        let mut next_slot = slot_words.into_iter();
        for item in &self.template {
            match item {
                TemplateItem::Word(w) => words.push(w),
                TemplateItem::Slot(slot) => {
                    if task.get(slot).is_some() {
                        words.push(next_slot.next().expect("one word per filled slot"));
                    }
                }
            }
        }
        words.join(" ")
    }
}

fn is_word(w: &str) -> bool {
    !w.is_empty() && w.chars().all(|c| c.is_alphanumeric() && c != SILENCE)
}

fn identity_lexicon(schema: &SlotSchema) -> BTreeMap<String, BTreeMap<String, String>> {
    schema
        .slots()
        .iter()
        .map(|s| (s.name.clone(), s.values.iter().map(|v| (v.clone(), v.clone())).collect()))
        .collect()
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    /// Frame timing and noise level. Its `confusion` must be unset: every
    /// speaker gets their own random confusion matrix.
    pub synthesis: SynthesisConfig,
    /// Dirichlet concentration of the per-speaker confusion rows.
    pub confusion_concentration: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            speakers: 5,
            utterances_per_speaker: 150,
            synthesis: SynthesisConfig::default(),
            confusion_concentration: 1.0,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.utterances_per_speaker == 0 {
            return Err(HarnessError::InvalidSpec(
                "speakers and utterances per speaker must be positive".into(),
            ));
        }
        if !(self.confusion_concentration > 0.0 && self.confusion_concentration.is_finite()) {
            return Err(HarnessError::InvalidSpec(format!(
                "confusion_concentration {} must be positive",
                self.confusion_concentration
            )));
        }
        if self.synthesis.confusion.is_some() {
            return Err(HarnessError::InvalidSpec(
                "per-speaker confusion matrices are drawn from the seed; leave synthesis.confusion unset".into(),
            ));
        }
        self.synthesis.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub transcript: String,
    pub task: TaskLabel,
    /// Posteriorgram file, relative to the manifest.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grammar: GrammarKind,
    pub alphabet: CharacterAlphabet,
    pub schema: SlotSchema,
    pub tasks: Vec<TaskLabel>,
    /// SHA-256 of the generation config.
    pub synthesis_digest: String,
    pub generation: GenerationConfig,
    pub utterances: Vec<UtteranceRecord>,
}

impl DatasetManifest {
    /// Hex SHA-256 over alphabet, schema and task inventory: the parts a
    /// trained model depends on.
    pub fn compat_digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            serde_json::to_string(&self.alphabet),
            serde_json::to_string(&self.schema),
            serde_json::to_string(&self.tasks),
        ] {
            h.update(part.expect("serialisable").as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Speaker ids in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for u in &self.utterances {
            if !out.contains(&u.speaker) {
                out.push(u.speaker.clone());
            }
        }
        out
    }

    fn task_indices(&self) -> Result<Vec<usize>> {
        let index: HashMap<&TaskLabel, usize> = self.tasks.iter().enumerate().map(|(k, t)| (t, k)).collect();
        self.utterances
            .iter()
            .map(|u| {
                index
                    .get(&u.task)
                    .copied()
                    .ok_or_else(|| HarnessError::Manifest(format!("utterance {} has task {} outside the inventory", u.id, u.task)))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(HarnessError::Manifest("empty task inventory".into()));
        }
        for t in &self.tasks {
            features::encode_semantics(t, &self.schema)?;
        }
        let mut ids = HashSet::new();
        for u in &self.utterances {
            if !ids.insert(u.id.as_str()) {
                return Err(HarnessError::Manifest(format!("duplicate utterance id {}", u.id)));
            }
        }
        self.task_indices()?;
        Ok(())
    }
}

/// A manifest together with its posteriorgrams, held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub posteriorgrams: Vec<Posteriorgram>,
    /// Index of each utterance's task in `manifest.tasks`.
    pub labels: Vec<usize>,
}

pub fn generate_dataset(grammar: &Grammar, cfg: &GenerationConfig) -> Result<Dataset> {
    grammar.validate()?;
    cfg.validate()?;
    let alphabet = grammar.alphabet();
    let mut utterances = Vec::new();
    let mut posteriorgrams = Vec::new();
    let mut labels = Vec::new();
    for s in 0..cfg.speakers {
        let speaker = format!("s{:02}", s + 1);
        let mut confusion_rng = seed::rng(seed::derive(cfg.seed, &[STREAM_CONFUSION, s as u64]));
        let confusion = ConfusionMatrix::random(alphabet.len(), cfg.confusion_concentration, &mut confusion_rng);
        let mut task_rng = seed::rng(seed::derive(cfg.seed, &[STREAM_TASKS, s as u64]));
        for u in 0..cfg.utterances_per_speaker {
            let task = task_rng.random_range(0..grammar.tasks.len());
            let transcript = grammar.render(task, &mut task_rng);
            let synthesis = SynthesisConfig {
                confusion: Some(confusion.clone()),
                seed: seed::derive(cfg.seed, &[STREAM_UTTERANCE, s as u64, u as u64]),
                ..cfg.synthesis.clone()
            };
            let pg = posteriorgram::synthesize_posteriorgram(&transcript, &alphabet, &synthesis)?;
            let id = format!("{speaker}_u{:04}", u + 1);
            utterances.push(UtteranceRecord {
                path: format!("pg/{id}.pg"),
                id,
                speaker: speaker.clone(),
                transcript,
                task: grammar.tasks[task].clone(),
            });
            posteriorgrams.push(pg);
            labels.push(task);
        }
    }
    let generation_json = serde_json::to_string(cfg).expect("serialisable");
    let manifest = DatasetManifest {
        grammar: grammar.kind,
        alphabet,
        schema: grammar.schema.clone(),
        tasks: grammar.tasks.clone(),
        synthesis_digest: hex::encode(Sha256::digest(generation_json.as_bytes())),
        generation: cfg.clone(),
        utterances,
    };
    Ok(Dataset {
        manifest,
        posteriorgrams,
        labels,
    })
}

impl Dataset {
    /// Writes `manifest.json` and the posteriorgram files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (u, pg) in self.manifest.utterances.iter().zip(&self.posteriorgrams) {
            let path = dir.join(&u.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
            }
            posteriorgram::save_posteriorgram(pg, &path)?;
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(&self.manifest).expect("serialisable");
        json.push('\n');
        textio::write_atomic(&manifest_path, json.as_bytes()).map_err(|e| HarnessError::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads a manifest and every posteriorgram it references.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| HarnessError::io(manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Manifest(format!("{}: {e}", manifest_path.display())))?;
        manifest.validate()?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let posteriorgrams = manifest
            .utterances
            .iter()
            .map(|u| {
                let pg = posteriorgram::load_posteriorgram(&base.join(&u.path))?;
                if pg.num_symbols() != manifest.alphabet.len() {
                    return Err(HarnessError::Manifest(format!(
                        "{} has {} symbols, the alphabet has {}",
                        u.path,
                        pg.num_symbols(),
                        manifest.alphabet.len()
                    )));
                }
                Ok(pg)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = manifest.task_indices()?;
        Ok(Dataset {
            manifest,
            posteriorgrams,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.posteriorgrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriorgrams.is_empty()
    }

    pub fn hac_features(&self, cfg: &HacConfig) -> Vec<HacVector> {
        self.posteriorgrams.iter().map(|pg| features::hac_encode(pg, cfg)).collect()
    }
}

// ---------------------------------------------------------------------------
// Decoders

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecoderConfig {
    Nmf { delays: HacConfig, nmf: NmfConfig },
    Capsule { capsule: CapsuleConfig },
}

impl DecoderConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderConfig::Nmf { .. } => "nmf",
            DecoderConfig::Capsule { .. } => "capsule",
        }
    }

    /// Delay set as reported in result files; `-` for the capsule decoder.
    pub fn delay_label(&self) -> String {
        match self {
            DecoderConfig::Nmf { delays, .. } => delays.to_string(),
            DecoderConfig::Capsule { .. } => "-".into(),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DecoderConfig::Nmf { nmf, .. } => nmf.seed = seed,
            DecoderConfig::Capsule { capsule } => capsule.seed = seed,
        }
        out
    }

    fn seed(&self) -> u64 {
        match self {
            DecoderConfig::Nmf { nmf, .. } => nmf.seed,
            DecoderConfig::Capsule { capsule } => capsule.seed,
        }
    }
}

/// A trained decoder of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Nmf(NmfModel),
    Capsule(CapsuleModel),
}

impl Decoder {
    /// Trains on the utterances `train` of `ds`.
    pub fn fit(ds: &Dataset, train: &[usize], cfg: &DecoderConfig) -> Result<Self> {
        let hacs = match cfg {
            DecoderConfig::Nmf { delays, .. } => Some(ds.hac_features(delays)),
            DecoderConfig::Capsule { .. } => None,
        };
        let mut decoder = Self::fit_with(ds, hacs.as_deref(), train, cfg)?;
        let digest = ds.manifest.compat_digest();
        match &mut decoder {
            Decoder::Nmf(m) => m.provenance.digest = digest,
            Decoder::Capsule(m) => m.digest = digest,
        }
        Ok(decoder)
    }

    fn fit_with(ds: &Dataset, hacs: Option<&[HacVector]>, train: &[usize], cfg: &DecoderConfig) -> Result<Self> {
        match cfg {
            DecoderConfig::Nmf { nmf, .. } => {
                let hacs = hacs.expect("HAC features for the NMF decoder");
                let pairs = train
                    .iter()
                    .map(|&i| {
                        let sem = features::encode_semantics(&ds.manifest.utterances[i].task, &ds.manifest.schema)?;
                        Ok((sem, hacs[i].clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Decoder::Nmf(nmf::nmf_train(&pairs, nmf)?))
            }
            DecoderConfig::Capsule { capsule } => {
                let data: Vec<(&Posteriorgram, usize)> =
                    train.iter().map(|&i| (&ds.posteriorgrams[i], ds.labels[i])).collect();
                Ok(Decoder::Capsule(capsule::capsule_train(&data, ds.manifest.tasks.len(), capsule)?))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Decoder::Nmf(_) => "nmf",
            Decoder::Capsule(_) => "capsule",
        }
    }

    /// Delay set of an NMF decoder.
    pub fn delays(&self) -> Option<&HacConfig> {
        match self {
            Decoder::Nmf(m) => m.provenance.hac.as_ref(),
            Decoder::Capsule(_) => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Decoder::Nmf(m) => m.save(path)?,
            Decoder::Capsule(m) => m.save(path)?,
        }
        Ok(())
    }

    /// Loads either model format, chosen by the file's first word.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        match text.split_ascii_whitespace().next() {
            Some("NMF") => Ok(Decoder::Nmf(NmfModel::from_text(&text)?)),
            Some("CAPS") => Ok(Decoder::Capsule(CapsuleModel::from_text(&text)?)),
            _ => Err(HarnessError::Manifest(format!("{} is not a model file", path.display()))),
        }
    }

    /// Checks that the decoder was trained for this dataset's alphabet,
    /// schema and task inventory.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        let digest = match self {
            Decoder::Nmf(m) => &m.provenance.digest,
            Decoder::Capsule(m) => &m.digest,
        };
        let expected = ds.manifest.compat_digest();
        if !digest.is_empty() && *digest != expected {
            return Err(HarnessError::Incompatible(format!(
                "model digest {digest} does not match dataset digest {expected}"
            )));
        }
        Ok(())
    }

    /// Predicted task index for each utterance in `idx`.
    pub fn predict(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
        self.check_compatible(ds)?;
        let hacs = match self {
            Decoder::Nmf(m) => {
                let delays = m
                    .provenance
                    .hac
                    .clone()
                    .ok_or_else(|| HarnessError::Incompatible("NMF model has no delay set".into()))?;
                let expected = delays.dim(ds.manifest.alphabet.len());
                if m.acoustic_dim() != expected {
                    return Err(HarnessError::Incompatible(format!(
                        "model expects {} acoustic features, dataset gives {expected}",
                        m.acoustic_dim()
                    )));
                }
                Some(idx.iter().map(|&i| features::hac_encode(&ds.posteriorgrams[i], &delays)).collect::<Vec<_>>())
            }
            Decoder::Capsule(_) => None,
        };
        match &hacs {
            Some(h) => {
                let all: Vec<usize> = (0..idx.len()).collect();
                self.predict_with(ds, Some(h), idx, &all)
            }
            None => self.predict_with(ds, None, idx, idx),
        }
    }

    /// `hacs[k]` must be the features of utterance `idx[k]` when given;
    /// `hac_pos[k]` says where to find it.
    fn predict_with(&self, ds: &Dataset, hacs: Option<&[HacVector]>, idx: &[usize], hac_pos: &[usize]) -> Result<Vec<usize>> {
        match self {
            Decoder::Nmf(model) => {
                let hacs = hacs.expect("HAC features for the NMF decoder");
                let tests: Vec<&HacVector> = hac_pos.iter().map(|&k| &hacs[k]).collect();
                let codebook = SemanticCodebook::new(&ds.manifest.schema, &ds.manifest.tasks)?;
                model
                    .infer_batch(&tests)?
                    .iter()
                    .map(|act| Ok(codebook.decode(&model.predict(&act.values)?)?.index))
                    .collect()
            }
            Decoder::Capsule(model) => {
                let pgs: Vec<&Posteriorgram> = idx.iter().map(|&i| &ds.posteriorgrams[i]).collect();
                Ok(model.classify_batch(&pgs)?)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fold planning

/// One shuffle-and-partition round of one speaker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub speaker: String,
    pub speaker_index: usize,
    /// 1-based fold number.
    pub fold: usize,
    /// Utterance indices (into the manifest) of each block.
    pub blocks: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn train(&self, m: usize) -> Vec<usize> {
        self.blocks[..m].concat()
    }

    pub fn test(&self, m: usize) -> Vec<usize> {
        self.blocks[m..].concat()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub blocks: usize,
    pub folds: usize,
    pub splits: Vec<FoldSplit>,
}

/// Shuffles each speaker's utterances once per fold with a seed derived
/// from `(seed, speaker, fold)` and cuts them into `blocks` blocks whose
/// sizes differ by at most one (larger blocks first).
pub fn plan_folds(manifest: &DatasetManifest, blocks: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
    if blocks < 2 || folds < 2 {
        return Err(HarnessError::InvalidSpec(format!(
            "need at least 2 blocks and 2 folds, got {blocks} blocks and {folds} folds"
        )));
    }
    let mut splits = Vec::new();
    for (s, speaker) in manifest.speakers().into_iter().enumerate() {
        let own: Vec<usize> = manifest
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == speaker)
            .map(|(i, _)| i)
            .collect();
        if own.len() < blocks {
            return Err(HarnessError::InsufficientUtterances {
                speaker,
                found: own.len(),
                needed: blocks,
            });
        }
        for fold in 1..=folds {
            let mut order = own.clone();
            order.shuffle(&mut seed::rng(seed::derive(seed, &[s as u64, fold as u64])));
            let (base, extra) = (order.len() / blocks, order.len() % blocks);
            let mut rest = order.as_slice();
            let mut parts = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let size = base + usize::from(b < extra);
                let (head, tail) = rest.split_at(size);
                parts.push(head.to_vec());
                rest = tail;
            }
            splits.push(FoldSplit {
                speaker: speaker.clone(),
                speaker_index: s,
                fold,
                blocks: parts,
            });
        }
    }
    let plan = FoldPlan { blocks, folds, splits };
    plan.verify(manifest)?;
    Ok(plan)
}

impl FoldPlan {
    /// Asserts exact partitions (disjoint blocks covering the speaker,
    /// sizes within one) and no train/test overlap at any `m`.
    pub fn verify(&self, manifest: &DatasetManifest) -> Result<()> {
        let violation = |m: String| Err(HarnessError::Protocol(m));
        for split in &self.splits {
            let mut own: Vec<usize> = manifest
                .utterances
                .iter()
                .enumerate()
                .filter(|(_, u)| u.speaker == split.speaker)
                .map(|(i, _)| i)
                .collect();
            let mut union: Vec<usize> = split.blocks.concat();
            union.sort_unstable();
            own.sort_unstable();
            if union != own {
                return violation(format!(
                    "blocks of {} fold {} do not partition the speaker's utterances",
                    split.speaker, split.fold
                ));
            }
            let sizes: Vec<usize> = split.blocks.iter().map(Vec::len).collect();
            let (min, max) = (sizes.iter().min().copied(), sizes.iter().max().copied());
            if split.blocks.len() != self.blocks || max.zip(min).is_none_or(|(a, b)| a - b > 1) {
                return violation(format!("unbalanced blocks for {} fold {}", split.speaker, split.fold));
            }
            for m in 1..self.blocks {
                let train: HashSet<usize> = split.train(m).into_iter().collect();
                if split.test(m).iter().any(|i| train.contains(i)) {
                    return violation(format!("train/test leakage for {} fold {} m={m}", split.speaker, split.fold));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Learning curves

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub blocks: usize,
    pub folds: usize,
    pub decoder: DecoderConfig,
    pub seed: u64,
    /// Training sizes to evaluate; `None` means every `m` in `1..blocks`.
    pub sizes: Option<Vec<usize>>,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl CurveSpec {
    pub fn new(blocks: usize, folds: usize, decoder: DecoderConfig, seed: u64) -> Self {
        CurveSpec {
            blocks,
            folds,
            decoder,
            seed,
            sizes: None,
            jobs: 1,
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sizes.clone().unwrap_or_else(|| (1..self.blocks).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 2 || self.folds < 2 {
            return Err(HarnessError::InvalidSpec(format!(
                "need at least 2 blocks and 2 folds, got {} blocks and {} folds",
                self.blocks, self.folds
            )));
        }
        if self.jobs == 0 {
            return Err(HarnessError::InvalidSpec("jobs must be >= 1".into()));
        }
        let sizes = self.sizes();
        if sizes.is_empty() || sizes.iter().any(|&m| m == 0 || m >= self.blocks) || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::InvalidSpec(format!(
                "training sizes must be increasing and within 1..{}",
                self.blocks - 1
            )));
        }
        match &self.decoder {
            DecoderConfig::Nmf { nmf, .. } => nmf.validate()?,
            DecoderConfig::Capsule { capsule } => capsule.validate()?,
        }
        Ok(())
    }
}

/// Accuracy of one (speaker, fold, m, delay set) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub speaker: String,
    pub fold: usize,
    pub m: usize,
    pub delay_set: String,
    pub decoder: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over (speaker, fold) cells divided by √n.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub decoder: String,
    pub delay_set: String,
    pub cells: Vec<CellResult>,
    pub points: Vec<CurvePoint>,
    pub plan: FoldPlan,
}

impl LearningCurve {
    /// Human-readable name of the configuration.
    pub fn label(&self) -> String {
        match self.decoder.as_str() {
            "nmf" => format!("nmf delays {}", self.delay_set),
            other => other.to_string(),
        }
    }

    pub fn point(&self, m: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.m == m)
    }

    pub fn raw_csv(&self) -> String {
        raw_csv(&self.cells)
    }

    pub fn aggregate_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).expect("in-memory CSV");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 CSV")
    }
}

pub fn raw_csv(cells: &[CellResult]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cells {
        w.serialize(c).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 CSV")
}

/// Mean and standard error of `xs`; the error is 0 for fewer than two
/// values.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn aggregate(cells: &[CellResult], sizes: &[usize]) -> Vec<CurvePoint> {
    sizes
        .iter()
        .map(|&m| {
            let accs: Vec<f64> = cells.iter().filter(|c| c.m == m).map(|c| c.accuracy).collect();
            let (mean_accuracy, stderr) = mean_stderr(&accs);
            CurvePoint {
                m,
                mean_accuracy,
                stderr,
            }
        })
        .collect()
}

struct Cell<'a> {
    split: &'a FoldSplit,
    m: usize,
    config: usize,
}

fn run_cells(ds: &Dataset, spec: &CurveSpec, plan: &FoldPlan, configs: &[DecoderConfig]) -> Result<Vec<Vec<CellResult>>> {
    let hacs: Vec<Option<Vec<HacVector>>> = configs
        .iter()
        .map(|c| match c {
            DecoderConfig::Nmf { delays, .. } => Some(ds.hac_features(delays)),
            DecoderConfig::Capsule { .. } => None,
        })
        .collect();
    let sizes = spec.sizes();
    let mut cells = Vec::new();
    for config in 0..configs.len() {
        for split in &plan.splits {
            for &m in &sizes {
                cells.push(Cell { split, m, config });
            }
        }
    }
    let eval = |cell: &Cell| -> Result<CellResult> {
        let cfg = &configs[cell.config];
        let seed = seed::derive(
            cfg.seed(),
            &[cell.split.speaker_index as u64, cell.split.fold as u64, cell.m as u64],
        );
        let cfg = cfg.with_seed(seed);
        let train = cell.split.train(cell.m);
        let test = cell.split.test(cell.m);
        let hacs = hacs[cell.config].as_deref();
        let decoder = Decoder::fit_with(ds, hacs, &train, &cfg)?;
        let predicted = decoder.predict_with(ds, hacs, &test, &test)?;
        let correct = predicted.iter().zip(&test).filter(|(p, &i)| **p == ds.labels[i]).count();
        log::debug!(
            "{} {} fold {} m={} -> {}/{}",
            cfg.name(),
            cell.split.speaker,
            cell.split.fold,
            cell.m,
            correct,
            test.len()
        );
        Ok(CellResult {
            speaker: cell.split.speaker.clone(),
            fold: cell.split.fold,
            m: cell.m,
            delay_set: cfg.delay_label(),
            decoder: cfg.name().to_string(),
            accuracy: correct as f64 / test.len() as f64,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| HarnessError::InvalidSpec(format!("cannot start {} workers: {e}", spec.jobs)))?;
    let results: Vec<CellResult> = pool.install(|| cells.par_iter().map(eval).collect::<Result<Vec<_>>>())?;
    let per_config = results.len() / configs.len().max(1);
    Ok(results.chunks(per_config.max(1)).map(<[CellResult]>::to_vec).collect())
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.posteriorgrams.len() != ds.manifest.utterances.len() || ds.labels.len() != ds.manifest.utterances.len() {
        return Err(HarnessError::Manifest("posteriorgram count does not match the manifest".into()));
    }
    Ok(())
}

pub fn run_learning_curve(ds: &Dataset, spec: &CurveSpec) -> Result<LearningCurve> {
    spec.validate()?;
    check_dataset(ds)?;
    let plan = plan_folds(&ds.manifest, spec.blocks, spec.folds, spec.seed)?;
    let cells = run_cells(ds, spec, &plan, std::slice::from_ref(&spec.decoder))?.remove(0);
    Ok(LearningCurve {
        decoder: spec.decoder.name().to_string(),
        delay_set: spec.decoder.delay_label(),
        points: aggregate(&cells, &spec.sizes()),
        cells,
        plan,
    })
}

/// Learning curves of the NMF decoder for several delay sets over the same
/// splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayAblation {
    pub delay_sets: Vec<HacConfig>,
    pub curves: Vec<LearningCurve>,
}

impl DelayAblation {
    /// Per delay set, mean accuracy minus that of the first delay set at
    /// every evaluated `m`.
    pub fn gaps(&self) -> Vec<Vec<f64>> {
        let base = &self.curves[0].points;
        self.curves
            .iter()
            .map(|c| {
                c.points
                    .iter()
                    .zip(base)
                    .map(|(p, b)| p.mean_accuracy - b.mean_accuracy)
                    .collect()
            })
            .collect()
    }

    pub fn raw_csv(&self) -> String {
        let cells: Vec<CellResult> = self.curves.iter().flat_map(|c| c.cells.iter().cloned()).collect();
        raw_csv(&cells)
    }
}

pub fn run_delay_ablation(ds: &Dataset, base: &CurveSpec, delay_sets: &[HacConfig]) -> Result<DelayAblation> {
    let DecoderConfig::Nmf { nmf, .. } = &base.decoder else {
        return Err(HarnessError::InvalidSpec("the delay ablation needs the nmf decoder".into()));
    };
    if delay_sets.is_empty() {
        return Err(HarnessError::InvalidSpec("no delay sets given".into()));
    }
    base.validate()?;
    check_dataset(ds)?;
    let plan = plan_folds(&ds.manifest, base.blocks, base.folds, base.seed)?;
    let configs: Vec<DecoderConfig> = delay_sets
        .iter()
        .map(|d| DecoderConfig::Nmf {
            delays: d.clone(),
            nmf: nmf.clone(),
        })
        .collect();
    let per_set = run_cells(ds, base, &plan, &configs)?;
    let sizes = base.sizes();
    let curves = per_set
        .into_iter()
        .zip(delay_sets)
        .map(|(cells, d)| LearningCurve {
            decoder: "nmf".into(),
            delay_set: d.to_string(),
            points: aggregate(&cells, &sizes),
            cells,
            plan: plan.clone(),
        })
        .collect();
    Ok(DelayAblation {
        delay_sets: delay_sets.to_vec(),
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn default_inventories() {
        assert_eq!(Grammar::robot().tasks.len(), 33);
        assert_eq!(Grammar::cards().tasks.len(), 38);
        assert_eq!(Grammar::toy().tasks.len(), 5);
    }

    #[test]
    fn card_orders_share_words() {
        let g = Grammar::cards();
        let ab = g.tasks.iter().position(|t| t.get("source") == Some("ace") && t.get("target") == Some("king")).unwrap();
        let ba = g.tasks.iter().position(|t| t.get("source") == Some("king") && t.get("target") == Some("ace")).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = g.render(ab, &mut rng);
        let y = g.render(ba, &mut rng);
        assert_eq!(x, "put ace on king");
        assert_eq!(y, "put king on ace");
        let mut wx: Vec<&str> = x.split(' ').collect();
        let mut wy: Vec<&str> = y.split(' ').collect();
        wx.sort_unstable();
        wy.sort_unstable();
        assert_eq!(wx, wy);
        assert_ne!(g.tasks[ab], g.tasks[ba]);
    }

    #[test]
    fn insensitive_grammar_rejects_ambiguous_multisets() {
        let mut g = Grammar::robot();
        // (home, quickly) and (north, slowly) become "slowly north" / "north slowly"
        g.lexicon.get_mut("direction").unwrap().insert("home".into(), "slowly".into());
        g.lexicon.get_mut("speed").unwrap().insert("quickly".into(), "north".into());
        assert!(matches!(g.validate(), Err(HarnessError::InvalidGrammar(_))));
    }

    #[test]
    fn sensitive_grammar_needs_shared_pool() {
        let mut g = Grammar::toy();
        g.kind = GrammarKind::OrderSensitive;
        assert!(g.validate().is_err());
    }

    #[test]
    fn alphabet_has_silence_first() {
        let a = Grammar::robot().alphabet();
        assert_eq!(a.silence_symbol(), '#');
        assert_eq!(a.silence_index(), 0);
        assert_eq!(a.index_of(' '), Some(1));
    }

    #[test]
    fn stderr_of_known_values() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[0.5]), (0.5, 0.0));
    }
}
