//! Domain types shared by every pipeline stage: stimulus events, beta and
//! feature matrices, and the assembled train/test dataset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::ndm::NdmMatrix;

/// Default stimulus presentation time in seconds.
pub const STIMULUS_DURATION: f64 = 2.5;
/// Default gap between consecutive stimuli in seconds.
pub const INTER_STIMULUS_INTERVAL: f64 = 1.0;
/// Default repetition time in seconds.
pub const DEFAULT_TR: f64 = 2.0;

pub const EVENTS_HEADER: &str =
    "stimulus_id\tmodality\tonset\tduration\trun\tsession\trole\tpaired_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Caption,
            Modality::Caption => Modality::Image,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "Image",
            Modality::Caption => "Caption",
        })
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "caption" => Ok(Modality::Caption),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Train,
    Test,
    Fixation,
    Blank,
    OneBackTarget,
}

impl Role {
    pub fn is_stimulus(self) -> bool {
        matches!(self, Role::Train | Role::Test)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "Train",
            Role::Test => "Test",
            Role::Fixation => "Fixation",
            Role::Blank => "Blank",
            Role::OneBackTarget => "OneBackTarget",
        })
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Role::Train),
            "test" => Ok(Role::Test),
            "fixation" => Ok(Role::Fixation),
            "blank" => Ok(Role::Blank),
            "onebacktarget" | "one_back_target" | "oneback" => Ok(Role::OneBackTarget),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

/// A scanner run, identified by its session and run indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunId {
    pub session: u32,
    pub run: u32,
}

impl RunId {
    pub fn new(session: u32, run: u32) -> Self {
        RunId { session, run }
    }

    /// File stem used for per-run BOLD matrices.
    pub fn file_stem(&self) -> String {
        format!("ses-{:02}_run-{:02}", self.session, self.run)
    }
}

/// One presentation on screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub stimulus_id: String,
    /// `None` for fixation and blank screens.
    pub modality: Option<Modality>,
    pub onset: f64,
    pub duration: f64,
    pub run: u32,
    pub session: u32,
    pub role: Role,
    /// Cross-modal counterpart; empty for non-stimulus events.
    pub paired_id: String,
}

impl StimulusEvent {
    pub fn run_id(&self) -> RunId {
        RunId::new(self.session, self.run)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub tr: f64,
    pub n_volumes_per_run: usize,
    pub runs: Vec<RunId>,
}

impl ScanParams {
    pub fn new(tr: f64, n_volumes_per_run: usize, runs: Vec<RunId>) -> Result<Self> {
        let p = ScanParams {
            tr,
            n_volumes_per_run,
            runs,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tr > 0.0) || !self.tr.is_finite() {
            return Err(Error::InvalidInput(format!("tr must be positive, got {}", self.tr)));
        }
        if self.n_volumes_per_run == 0 {
            return Err(Error::InvalidInput("n_volumes_per_run must be positive".into()));
        }
        Ok(())
    }

    pub fn run_duration(&self) -> f64 {
        self.n_volumes_per_run as f64 * self.tr
    }
}

/// Trials x voxels beta estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaMatrix {
    values: DMatrix<f32>,
    trial_ids: Vec<String>,
    voxel_ids: Vec<u32>,
}

impl BetaMatrix {
    pub fn new(values: DMatrix<f32>, trial_ids: Vec<String>, voxel_ids: Vec<u32>) -> Result<Self> {
        if values.nrows() != trial_ids.len() || values.ncols() != voxel_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "beta matrix {}x{} with {} trial ids and {} voxel ids",
                values.nrows(),
                values.ncols(),
                trial_ids.len(),
                voxel_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("beta matrix contains NaN/Inf".into()));
        }
        let mut seen = HashSet::with_capacity(trial_ids.len());
        for id in &trial_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateTrial(id.clone()));
            }
        }
        let mut vseen = HashSet::with_capacity(voxel_ids.len());
        for v in &voxel_ids {
            if !vseen.insert(*v) {
                return Err(Error::InvalidInput(format!("duplicate voxel id {v}")));
            }
        }
        Ok(BetaMatrix {
            values,
            trial_ids,
            voxel_ids,
        })
    }

    pub fn from_f64(values: &DMatrix<f64>, trial_ids: Vec<String>, voxel_ids: Vec<u32>) -> Result<Self> {
        Self::new(values.map(|v| v as f32), trial_ids, voxel_ids)
    }

    pub fn empty(voxel_ids: Vec<u32>) -> Self {
        BetaMatrix {
            values: DMatrix::zeros(0, voxel_ids.len()),
            trial_ids: Vec::new(),
            voxel_ids,
        }
    }

    pub fn values(&self) -> &DMatrix<f32> {
        &self.values
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        self.values.map(f64::from)
    }

    pub fn trial_ids(&self) -> &[String] {
        &self.trial_ids
    }

    pub fn voxel_ids(&self) -> &[u32] {
        &self.voxel_ids
    }

    pub fn n_trials(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> BetaMatrix {
        let values = self.values.select_rows(rows);
        let trial_ids = rows.iter().map(|&r| self.trial_ids[r].clone()).collect();
        BetaMatrix {
            values,
            trial_ids,
            voxel_ids: self.voxel_ids.clone(),
        }
    }

    /// Keeps the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> BetaMatrix {
        let values = self.values.select_columns(cols);
        let voxel_ids = cols.iter().map(|&c| self.voxel_ids[c]).collect();
        BetaMatrix {
            values,
            trial_ids: self.trial_ids.clone(),
            voxel_ids,
        }
    }

    pub fn to_ndm(&self) -> NdmMatrix {
        let (r, c) = self.values.shape();
        let data = row_major(&self.values);
        NdmMatrix {
            rows: r,
            cols: c,
            data,
            row_ids: self.trial_ids.clone(),
            meta: Some(json!({ "voxel_ids": self.voxel_ids })),
        }
    }

    pub fn from_ndm(m: NdmMatrix) -> Result<Self> {
        let voxel_ids = match m.meta.as_ref().and_then(|v| v.get("voxel_ids")) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => (0..m.cols as u32).collect(),
        };
        let trial_ids = if m.row_ids.is_empty() && m.rows > 0 {
            return Err(Error::Format("beta matrix needs trial ids".into()));
        } else {
            m.row_ids
        };
        let values = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
        Self::new(values, trial_ids, voxel_ids)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_ndm().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ndm(NdmMatrix::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureModality {
    Vision,
    Language,
    MultimodalConcat,
}

impl fmt::Display for FeatureModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureModality::Vision => "vision",
            FeatureModality::Language => "language",
            FeatureModality::MultimodalConcat => "multimodal",
        })
    }
}

impl FromStr for FeatureModality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "vision" => Ok(FeatureModality::Vision),
            "language" => Ok(FeatureModality::Language),
            "multimodal" | "multimodalconcat" | "multimodal_concat" => {
                Ok(FeatureModality::MultimodalConcat)
            }
            _ => Err(format!("unknown feature modality {s:?}")),
        }
    }
}

/// Stimuli x dimensions model features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    stimulus_ids: Vec<String>,
    index: HashMap<String, usize>,
    pub model_name: String,
    pub feature_modality: FeatureModality,
}

impl FeatureMatrix {
    pub fn new(
        values: DMatrix<f64>,
        stimulus_ids: Vec<String>,
        model_name: impl Into<String>,
        feature_modality: FeatureModality,
    ) -> Result<Self> {
        if values.nrows() != stimulus_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows for {} stimulus ids",
                values.nrows(),
                stimulus_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature matrix contains NaN/Inf".into()));
        }
        let mut index = HashMap::with_capacity(stimulus_ids.len());
        for (i, id) in stimulus_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateTrial(id.clone()));
            }
        }
        Ok(FeatureMatrix {
            values,
            stimulus_ids,
            index,
            model_name: model_name.into(),
            feature_modality,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn n_dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_stimuli(&self) -> usize {
        self.values.nrows()
    }

    pub fn row_of(&self, stimulus_id: &str) -> Option<usize> {
        self.index.get(stimulus_id).copied()
    }

    pub fn to_ndm(&self) -> NdmMatrix {
        let values = self.values.map(|v| v as f32);
        NdmMatrix {
            rows: values.nrows(),
            cols: values.ncols(),
            data: row_major(&values),
            row_ids: self.stimulus_ids.clone(),
            meta: Some(json!({
                "model_name": self.model_name,
                "feature_modality": self.feature_modality,
            })),
        }
    }

    /// Builds a feature matrix from a file; `fallback` supplies the model
    /// name and modality when the file carries no metadata trailer.
    pub fn from_ndm(m: NdmMatrix, fallback: Option<(&str, FeatureModality)>) -> Result<Self> {
        let meta = m.meta.as_ref();
        let model_name = meta
            .and_then(|v| v.get("model_name"))
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .or_else(|| fallback.map(|f| f.0.to_owned()))
            .ok_or_else(|| Error::Format("feature file has no model name".into()))?;
        let feature_modality = match meta.and_then(|v| v.get("feature_modality")) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => fallback
                .map(|f| f.1)
                .ok_or_else(|| Error::Format("feature file has no feature modality".into()))?,
        };
        if m.row_ids.is_empty() && m.rows > 0 {
            return Err(Error::Format("feature matrix needs stimulus ids".into()));
        }
        let values = DMatrix::from_row_slice(m.rows, m.cols, &m.data).map(f64::from);
        Self::new(values, m.row_ids, model_name, feature_modality)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_ndm().save(path)
    }

    pub fn load(path: impl AsRef<Path>, fallback: Option<(&str, FeatureModality)>) -> Result<Self> {
        Self::from_ndm(NdmMatrix::load(path)?, fallback)
    }
}

pub(crate) fn row_major<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Events, train and test betas, and the cross-modal pairing map.
#[derive(Debug, Clone)]
pub struct Dataset {
    events: Vec<StimulusEvent>,
    betas_train: BetaMatrix,
    betas_test: BetaMatrix,
    pairing: BTreeMap<String, String>,
    stimulus_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn events(&self) -> &[StimulusEvent] {
        &self.events
    }

    pub fn betas_train(&self) -> &BetaMatrix {
        &self.betas_train
    }

    pub fn betas_test(&self) -> &BetaMatrix {
        &self.betas_test
    }

    pub fn pairing(&self) -> &BTreeMap<String, String> {
        &self.pairing
    }

    /// First Train/Test event presenting `stimulus_id`.
    pub fn event_of(&self, stimulus_id: &str) -> Option<&StimulusEvent> {
        self.stimulus_index.get(stimulus_id).map(|&i| &self.events[i])
    }

    pub fn modality_of(&self, stimulus_id: &str) -> Option<Modality> {
        self.event_of(stimulus_id).and_then(|e| e.modality)
    }

    pub fn train_events(&self) -> Vec<&StimulusEvent> {
        self.betas_train
            .trial_ids()
            .iter()
            .map(|id| self.event_of(id).expect("validated"))
            .collect()
    }

    pub fn test_events(&self) -> Vec<&StimulusEvent> {
        self.betas_test
            .trial_ids()
            .iter()
            .map(|id| self.event_of(id).expect("validated"))
            .collect()
    }

    /// Replaces the beta matrices (e.g. after ROI masking), re-validating.
    pub fn with_betas(&self, betas_train: BetaMatrix, betas_test: BetaMatrix) -> Result<Dataset> {
        assemble_dataset(self.events.clone(), betas_train, betas_test)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let events = read_events(dir.join("events.tsv"))?;
        let train = BetaMatrix::load(dir.join("train.ndm"))?;
        let test = BetaMatrix::load(dir.join("test.ndm"))?;
        assemble_dataset(events, train, test)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_events(dir.join("events.tsv"), &self.events)?;
        self.betas_train.save(dir.join("train.ndm"))?;
        self.betas_test.save(dir.join("test.ndm"))
    }
}

/// Checks event-table invariants on their own.
pub fn validate_events(events: &[StimulusEvent]) -> Result<()> {
    let mut train_seen: HashSet<&str> = HashSet::new();
    let mut test_ids: HashSet<&str> = HashSet::new();
    let mut modality: HashMap<&str, Modality> = HashMap::new();
    let mut last_onset: HashMap<RunId, f64> = HashMap::new();

    for e in events {
        if !(e.onset >= 0.0) || !e.onset.is_finite() {
            return Err(Error::InvalidInput(format!(
                "event {} has invalid onset {}",
                e.stimulus_id, e.onset
            )));
        }
        if !(e.duration >= 0.0) || !e.duration.is_finite() {
            return Err(Error::InvalidInput(format!(
                "event {} has invalid duration {}",
                e.stimulus_id, e.duration
            )));
        }
        if let Some(prev) = last_onset.insert(e.run_id(), e.onset) {
            if e.onset <= prev {
                return Err(Error::InvalidInput(format!(
                    "onsets in session {} run {} are not strictly increasing at {}",
                    e.session, e.run, e.stimulus_id
                )));
            }
        }
        if e.role.is_stimulus() {
            let m = e.modality.ok_or_else(|| {
                Error::InvalidInput(format!("stimulus {} has no modality", e.stimulus_id))
            })?;
            if e.paired_id.is_empty() || e.paired_id == e.stimulus_id {
                return Err(Error::MissingPair(e.stimulus_id.clone()));
            }
            if let Some(prev) = modality.insert(&e.stimulus_id, m) {
                if prev != m {
                    return Err(Error::InvalidInput(format!(
                        "stimulus {} presented with two modalities",
                        e.stimulus_id
                    )));
                }
            }
        }
        match e.role {
            Role::Train => {
                if !train_seen.insert(&e.stimulus_id) {
                    return Err(Error::DuplicateTrial(e.stimulus_id.clone()));
                }
            }
            Role::Test => {
                test_ids.insert(&e.stimulus_id);
            }
            _ => {}
        }
    }
    if let Some(id) = train_seen.intersection(&test_ids).next() {
        return Err(Error::DuplicateTrial(format!("{id} is both a Train and a Test stimulus")));
    }
    for e in events.iter().filter(|e| e.role.is_stimulus()) {
        if let (Some(own), Some(&other)) = (e.modality, modality.get(e.paired_id.as_str())) {
            if own == other {
                return Err(Error::InvalidInput(format!(
                    "{} is paired with same-modality stimulus {}",
                    e.stimulus_id, e.paired_id
                )));
            }
        }
    }
    Ok(())
}

pub fn assemble_dataset(
    events: Vec<StimulusEvent>,
    betas_train: BetaMatrix,
    betas_test: BetaMatrix,
) -> Result<Dataset> {
    if events.is_empty() {
        return Err(Error::EmptyDataset);
    }
    validate_events(&events)?;
    if betas_train.voxel_ids() != betas_test.voxel_ids() {
        return Err(Error::ShapeMismatch(
            "train and test betas cover different voxels".into(),
        ));
    }

    let mut stimulus_index = HashMap::new();
    let mut pairing = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if e.role.is_stimulus() {
            stimulus_index.entry(e.stimulus_id.clone()).or_insert(i);
            pairing.insert(e.stimulus_id.clone(), e.paired_id.clone());
        }
    }
    for id in betas_train.trial_ids() {
        match stimulus_index.get(id).map(|&i| events[i].role) {
            Some(Role::Train) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "train beta row {id} has no Train event"
                )))
            }
        }
    }
    for id in betas_test.trial_ids() {
        match stimulus_index.get(id).map(|&i| events[i].role) {
            Some(Role::Test) => {}
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "test beta row {id} has no Test event"
                )))
            }
        }
    }
    Ok(Dataset {
        events,
        betas_train,
        betas_test,
        pairing,
        stimulus_index,
    })
}

/// Restricts training trials to one presentation modality. The test set
/// is left untouched.
pub fn select_modality(ds: &Dataset, m: Modality) -> Dataset {
    let keep: Vec<usize> = ds
        .betas_train
        .trial_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| ds.modality_of(id) == Some(m))
        .map(|(i, _)| i)
        .collect();
    let betas_train = ds.betas_train.select_rows(&keep);
    let events: Vec<StimulusEvent> = ds
        .events
        .iter()
        .filter(|e| e.role != Role::Train || e.modality == Some(m))
        .cloned()
        .collect();
    let mut stimulus_index = HashMap::new();
    let mut pairing = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if e.role.is_stimulus() {
            stimulus_index.entry(e.stimulus_id.clone()).or_insert(i);
            pairing.insert(e.stimulus_id.clone(), e.paired_id.clone());
        }
    }
    Dataset {
        events,
        betas_train,
        betas_test: ds.betas_test.clone(),
        pairing,
        stimulus_index,
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<StimulusEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text)
}

pub fn parse_events(text: &str) -> Result<Vec<StimulusEvent>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == EVENTS_HEADER => {}
        _ => {
            return Err(Error::EventsParse {
                line: 1,
                msg: "missing or unexpected header".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::EventsParse { line: i + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 columns, found {}", f.len())));
        }
        let modality = match f[1] {
            "" | "-" | "none" | "None" => None,
            s => Some(s.parse::<Modality>().map_err(err)?),
        };
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad {what} {s:?}")))
        };
        let int = |s: &str, what: &str| -> Result<u32> {
            s.parse::<u32>()
                .map_err(|_| err(format!("bad {what} {s:?}")))
        };
        out.push(StimulusEvent {
            stimulus_id: f[0].to_owned(),
            modality,
            onset: num(f[2], "onset")?,
            duration: num(f[3], "duration")?,
            run: int(f[4], "run")?,
            session: int(f[5], "session")?,
            role: f[6].parse::<Role>().map_err(err)?,
            paired_id: f[7].to_owned(),
        });
    }
    Ok(out)
}

pub fn format_events(events: &[StimulusEvent]) -> String {
    let mut s = String::with_capacity(events.len() * 64);
    s.push_str(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        let m = e.modality.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            e.stimulus_id, m, e.onset, e.duration, e.run, e.session, e.role, e.paired_id
        ));
    }
    s
}

pub fn write_events(path: impl AsRef<Path>, events: &[StimulusEvent]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_events(events)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(id: &str, m: Modality, onset: f64, role: Role, pair: &str) -> StimulusEvent {
        StimulusEvent {
            stimulus_id: id.into(),
            modality: Some(m),
            onset,
            duration: STIMULUS_DURATION,
            run: 1,
            session: 1,
            role,
            paired_id: pair.into(),
        }
    }

    fn small() -> (Vec<StimulusEvent>, BetaMatrix, BetaMatrix) {
        let events = vec![
            ev("img-1", Modality::Image, 0.0, Role::Train, "cap-1"),
            ev("cap-2", Modality::Caption, 3.5, Role::Train, "img-2"),
            ev("img-9", Modality::Image, 7.0, Role::Test, "cap-9"),
            ev("cap-9", Modality::Caption, 10.5, Role::Test, "img-9"),
            ev("img-9", Modality::Image, 14.0, Role::Test, "cap-9"),
        ];
        let train = BetaMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            vec!["img-1".into(), "cap-2".into()],
            vec![0, 1],
        )
        .unwrap();
        let test = BetaMatrix::new(
            DMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]),
            vec!["img-9".into(), "cap-9".into()],
            vec![0, 1],
        )
        .unwrap();
        (events, train, test)
    }

    #[test]
    fn assembles_and_builds_pairing() {
        let (events, train, test) = small();
        let ds = assemble_dataset(events, train, test).unwrap();
        assert_eq!(ds.pairing().len(), 4);
        assert_eq!(ds.pairing()["cap-2"], "img-2");
        assert_eq!(ds.modality_of("cap-9"), Some(Modality::Caption));
    }

    #[test]
    fn empty_events_rejected() {
        let (_, train, test) = small();
        assert!(matches!(
            assemble_dataset(vec![], train, test),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn missing_pair_rejected() {
        let (mut events, train, test) = small();
        events[0].paired_id.clear();
        assert!(matches!(
            assemble_dataset(events, train, test),
            Err(Error::MissingPair(_))
        ));
    }

    #[test]
    fn repeated_train_rejected() {
        let (mut events, train, test) = small();
        let mut dup = events[0].clone();
        dup.onset = 20.0;
        events.push(dup);
        assert!(matches!(
            assemble_dataset(events, train, test),
            Err(Error::DuplicateTrial(_))
        ));
    }

    #[test]
    fn test_stimulus_also_train_rejected() {
        let (mut events, train, test) = small();
        events.push(ev("img-9", Modality::Image, 20.0, Role::Train, "cap-9"));
        assert!(assemble_dataset(events, train, test).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (events, train, _) = small();
        let test = BetaMatrix::new(
            DMatrix::from_row_slice(1, 1, &[5.0]),
            vec!["img-9".into()],
            vec![0],
        )
        .unwrap();
        assert!(matches!(
            assemble_dataset(events, train, test),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn non_increasing_onsets_rejected() {
        let (mut events, train, test) = small();
        events[1].onset = 0.0;
        assert!(assemble_dataset(events, train, test).is_err());
    }

    #[test]
    fn beta_matrix_rejects_nan_and_duplicates() {
        let bad = DMatrix::from_row_slice(1, 1, &[f32::NAN]);
        assert!(BetaMatrix::new(bad, vec!["a".into()], vec![0]).is_err());
        let dup = DMatrix::zeros(2, 1);
        assert!(matches!(
            BetaMatrix::new(dup, vec!["a".into(), "a".into()], vec![0]),
            Err(Error::DuplicateTrial(_))
        ));
    }

    #[test]
    fn select_modality_is_idempotent_and_partitions() {
        let (events, train, test) = small();
        let ds = assemble_dataset(events, train, test).unwrap();
        let img = select_modality(&ds, Modality::Image);
        let cap = select_modality(&ds, Modality::Caption);
        assert_eq!(img.betas_train().trial_ids(), &["img-1".to_string()]);
        assert_eq!(img.betas_train().n_trials() + cap.betas_train().n_trials(), 2);
        assert_eq!(img.betas_test(), ds.betas_test());
        let twice = select_modality(&img, Modality::Image);
        assert_eq!(twice.betas_train(), img.betas_train());
        assert_eq!(twice.events(), img.events());
    }

    #[test]
    fn events_tsv_round_trip() {
        let (mut events, _, _) = small();
        events.push(StimulusEvent {
            stimulus_id: "fix".into(),
            modality: None,
            onset: 17.5,
            duration: 2.5,
            run: 1,
            session: 1,
            role: Role::Fixation,
            paired_id: String::new(),
        });
        let text = format_events(&events);
        assert!(text.starts_with(EVENTS_HEADER));
        assert_eq!(parse_events(&text).unwrap(), events);
    }

    #[test]
    fn events_parse_errors_carry_line() {
        let text = format!("{EVENTS_HEADER}\na\tImage\tx\t2.5\t1\t1\tTrain\tb\n");
        assert!(matches!(
            parse_events(&text),
            Err(Error::EventsParse { line: 2, .. })
        ));
        assert!(parse_events("bad header\n").is_err());
    }

    #[test]
    fn beta_matrix_ndm_round_trip_keeps_voxel_ids() {
        let b = BetaMatrix::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]),
            vec!["t".into()],
            vec![4, 9, 11],
        )
        .unwrap();
        assert_eq!(BetaMatrix::from_ndm(b.to_ndm()).unwrap(), b);
    }
}
