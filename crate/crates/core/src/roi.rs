//! Atlas-label ROI definitions, mask construction and column restriction
//! of beta matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BetaMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hemisphere {
    L,
    R,
}

impl FromStr for Hemisphere {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "L" | "l" | "lh" | "left" => Ok(Hemisphere::L),
            "R" | "r" | "rh" | "right" => Ok(Hemisphere::R),
            _ => Err(format!("unknown hemisphere {s:?}")),
        }
    }
}

impl fmt::Display for Hemisphere {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hemisphere::L => "L",
            Hemisphere::R => "R",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoiName {
    LowLevelVisual,
    HighLevelVisual,
    Language,
    Custom,
}

impl RoiName {
    pub const NAMED: [RoiName; 3] = [RoiName::LowLevelVisual, RoiName::HighLevelVisual, RoiName::Language];
}

impl fmt::Display for RoiName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RoiName::LowLevelVisual => "low",
            RoiName::HighLevelVisual => "high",
            RoiName::Language => "language",
            RoiName::Custom => "custom",
        })
    }
}

impl FromStr for RoiName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "low" | "lowlevelvisual" | "lowvisual" => Ok(RoiName::LowLevelVisual),
            "high" | "highlevelvisual" | "highvisual" => Ok(RoiName::HighLevelVisual),
            "language" | "lang" => Ok(RoiName::Language),
            "custom" => Ok(RoiName::Custom),
            _ => Err(Error::UnknownRoi(s.to_owned())),
        }
    }
}

/// One atlas label included in an ROI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiLabel {
    pub hemisphere: Hemisphere,
    pub label_id: u32,
    pub label: String,
    pub description: String,
}

use Hemisphere::{L, R};

// Destrieux atlas labels, one row per (hemisphere, label).
const HIGH_LEVEL_VISUAL: [(Hemisphere, u32, &str, &str); 14] = [
    (L, 21, "G_oc-temp_lat-fusifor", "Lateral occipito-temporal gyrus (fusiform gyrus, O4-T4)"),
    (R, 21, "G_oc-temp_lat-fusifor", "Lateral occipito-temporal gyrus (fusiform gyrus, O4-T4)"),
    (L, 23, "G_oc-temp_med-Parahip", "Parahippocampal gyrus, parahippocampal part of the medial occipito-temporal gyrus, (T5)"),
    (R, 23, "G_oc-temp_med-Parahip", "Parahippocampal gyrus, parahippocampal part of the medial occipito-temporal gyrus, (T5)"),
    (L, 61, "S_oc-temp_med_and_Lingual", "Medial occipito-temporal sulcus (collateral sulcus) and lingual sulcus"),
    (R, 61, "S_oc-temp_med_and_Lingual", "Medial occipito-temporal sulcus (collateral sulcus) and lingual sulcus"),
    (L, 60, "S_oc-temp_lat", "Lateral occipito-temporal sulcus"),
    (R, 60, "S_oc-temp_lat", "Lateral occipito-temporal sulcus"),
    (L, 37, "G_temporal_inf", "Inferior temporal gyrus (T3)"),
    (L, 38, "G_temporal_middle", "Middle temporal gyrus (T2)"),
    (L, 72, "S_temporal_inf", "Inferior temporal sulcus"),
    (R, 37, "G_temporal_inf", "Inferior temporal gyrus (T3)"),
    (R, 38, "G_temporal_middle", "Middle temporal gyrus (T2)"),
    (R, 72, "S_temporal_inf", "Inferior temporal sulcus"),
];

const LOW_LEVEL_VISUAL: [(Hemisphere, u32, &str, &str); 18] = [
    (L, 2, "G_and_S_occipital_inf", "Inferior occipital gyrus (O3) and sulcus"),
    (L, 19, "G_occipital_middle", "Middle occipital gyrus (O2, lateral occipital gyrus)"),
    (L, 20, "G_occipital_sup", "Superior occipital gyrus (O1)"),
    (L, 42, "Pole_occipital", "Occipital pole"),
    (L, 57, "S_oc_middle_and_Lunatus", "Middle occipital sulcus and lunatus sulcus"),
    (L, 58, "S_oc_sup_and_transversal", "Superior occipital sulcus and transverse occipital sulcus"),
    (L, 59, "S_occipital_ant", "Anterior occipital sulcus and preoccipital notch (temporo-occipital incisure)"),
    (L, 65, "S_parieto_occipital", "Parieto-occipital sulcus (or fissure)"),
    (R, 2, "G_and_S_occipital_inf", "Inferior occipital gyrus (O3) and sulcus"),
    (R, 19, "G_occipital_middle", "Middle occipital gyrus (O2, lateral occipital gyrus)"),
    (R, 20, "G_occipital_sup", "Superior occipital gyrus (O1)"),
    (R, 42, "Pole_occipital", "Occipital pole"),
    (R, 57, "S_oc_middle_and_Lunatus", "Middle occipital sulcus and lunatus sulcus"),
    (R, 58, "S_oc_sup_and_transversal", "Superior occipital sulcus and transverse occipital sulcus"),
    (R, 59, "S_occipital_ant", "Anterior occipital sulcus and preoccipital notch (temporo-occipital incisure)"),
    (R, 65, "S_parieto_occipital", "Parieto-occipital sulcus (or fissure)"),
    (L, 22, "G_oc-temp_med-Lingual", "Lingual gyrus, ligual part of the medial occipito-temporal gyrus"),
    (R, 22, "G_oc-temp_med-Lingual", "Lingual gyrus, ligual part of the medial occipito-temporal gyrus"),
];

const LANGUAGE: [(Hemisphere, u32, &str, &str); 12] = [
    (L, 12, "G_front_inf-Opercular", "Opercular part of the inferior frontal gyrus"),
    (L, 13, "G_front_inf-Orbital", "Orbital part of the inferior frontal gyrus"),
    (L, 14, "G_front_inf-Triangul", "Triangular part of the inferior frontal gyrus"),
    (L, 25, "G_pariet_inf-Angular", "Angular gyrus"),
    (L, 15, "G_front_middle", "Middle frontal gyrus (F2)"),
    (L, 34, "G_temp_sup-Lateral", "Lateral aspect of the superior temporal gyrus"),
    (L, 36, "G_temp_sup-Plan_tempo", "Planum temporale or temporal plane of the superior temporal gyrus"),
    (L, 35, "G_temp_sup-Plan_polar", "Planum polare of the superior temporal gyrus"),
    (L, 4, "G_and_S_subcentral", "Subcentral gyrus (central operculum) and sulci"),
    (L, 26, "G_pariet_inf-Supramar", "Supramarginal gyrus"),
    (L, 9, "G_cingul-Post-dorsal", "Posterior-dorsal part of the cingulate gyrus (dPCC)"),
    (L, 10, "G_cingul-Post-ventral", "Posterior-ventral part of the cingulate gyrus (vPCC, isthmus of the cingulate gyrus)"),
];

/// Label rows of a named ROI, in table order.
pub fn load_roi_definition(name: RoiName) -> Result<Vec<RoiLabel>> {
    let table: &[(Hemisphere, u32, &str, &str)] = match name {
        RoiName::HighLevelVisual => &HIGH_LEVEL_VISUAL,
        RoiName::LowLevelVisual => &LOW_LEVEL_VISUAL,
        RoiName::Language => &LANGUAGE,
        RoiName::Custom => return Err(Error::UnknownRoi("custom ROIs need a label list".into())),
    };
    Ok(table
        .iter()
        .map(|&(hemisphere, label_id, label, description)| RoiLabel {
            hemisphere,
            label_id,
            label: label.to_owned(),
            description: description.to_owned(),
        })
        .collect())
}

pub fn load_roi_definition_by_name(name: &str) -> Result<Vec<RoiLabel>> {
    load_roi_definition(name.parse()?)
}

/// Short label name for an atlas id, when it is one of the embedded ROI
/// labels.
pub fn known_label_name(label_id: u32) -> Option<&'static str> {
    HIGH_LEVEL_VISUAL
        .iter()
        .chain(&LOW_LEVEL_VISUAL)
        .chain(&LANGUAGE)
        .find(|r| r.1 == label_id)
        .map(|r| r.2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub hemisphere: Hemisphere,
    pub label_id: u32,
    pub label_name: String,
}

/// Voxel id to atlas label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AtlasAssignment {
    pub voxels: BTreeMap<u32, AtlasEntry>,
}

impl AtlasAssignment {
    pub fn insert(&mut self, voxel_id: u32, hemisphere: Hemisphere, label_id: u32) {
        let label_name = known_label_name(label_id).unwrap_or_default().to_owned();
        self.voxels.insert(
            voxel_id,
            AtlasEntry {
                hemisphere,
                label_id,
                label_name,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Two tab-separated columns: voxel id and `"HEMI label_id"`. An
    /// optional third column holds the label name; a header line whose first
    /// field is not a number is skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut atlas = AtlasAssignment::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let Ok(voxel) = f[0].trim().parse::<u32>() else {
                if i == 0 {
                    continue;
                }
                return Err(Error::InvalidInput(format!("atlas line {}: bad voxel id", i + 1)));
            };
            let (hemi, label) = f
                .get(1)
                .and_then(|s| parse_label(s).ok())
                .ok_or_else(|| Error::InvalidInput(format!("atlas line {}: bad label", i + 1)))?;
            atlas.insert(voxel, hemi, label);
            if let Some(name) = f.get(2).filter(|s| !s.is_empty()) {
                atlas.voxels.get_mut(&voxel).unwrap().label_name = (*name).to_owned();
            }
        }
        if atlas.is_empty() {
            return Err(Error::InvalidInput("atlas has no voxels".into()));
        }
        Ok(atlas)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("voxel_id\tlabel\n");
        for (v, e) in &self.voxels {
            s.push_str(&format!("{v}\t{} {}\n", e.hemisphere, e.label_id));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses `"L 42"` (space or tab separated).
pub fn parse_label(s: &str) -> Result<(Hemisphere, u32)> {
    let mut it = s.split_whitespace();
    let bad = || Error::InvalidInput(format!("bad label {s:?}"));
    let hemi = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let id = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    Ok((hemi, id))
}

/// Reads a custom label list: one `HEMI label_id [name]` per line, `#`
/// comments allowed.
pub fn parse_custom_labels(text: &str) -> Result<Vec<RoiLabel>> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = format!(
            "{} {}",
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default()
        );
        let (hemisphere, label_id) = parse_label(&head)?;
        let label = parts.collect::<Vec<_>>().join(" ");
        out.push(RoiLabel {
            hemisphere,
            label_id,
            label,
            description: String::new(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub name: RoiName,
    /// Sorted, unique.
    pub voxel_ids: Vec<u32>,
    pub source_labels: Vec<(Hemisphere, u32)>,
}

/// All atlas voxels whose (hemisphere, label) appears in `defn`.
pub fn build_mask(name: RoiName, defn: &[RoiLabel], atlas: &AtlasAssignment) -> Result<RoiMask> {
    if atlas.is_empty() {
        return Err(Error::InvalidInput("atlas has no voxels".into()));
    }
    let wanted: BTreeSet<(Hemisphere, u32)> =
        defn.iter().map(|l| (l.hemisphere, l.label_id)).collect();
    let voxel_ids: Vec<u32> = atlas
        .voxels
        .iter()
        .filter(|(_, e)| wanted.contains(&(e.hemisphere, e.label_id)))
        .map(|(v, _)| *v)
        .collect();
    if voxel_ids.is_empty() {
        return Err(Error::EmptyMask(name.to_string()));
    }
    Ok(RoiMask {
        name,
        voxel_ids,
        source_labels: wanted.into_iter().collect(),
    })
}

/// Mask for one of the three named ROIs.
pub fn named_mask(name: RoiName, atlas: &AtlasAssignment) -> Result<RoiMask> {
    build_mask(name, &load_roi_definition(name)?, atlas)
}

/// Restricts columns to the mask, preserving the matrix' column order.
pub fn apply_mask(b: &BetaMatrix, m: &RoiMask) -> Result<BetaMatrix> {
    let pos: HashMap<u32, usize> = b
        .voxel_ids()
        .iter()
        .enumerate()
        .map(|(i, v)| (*v, i))
        .collect();
    if let Some(v) = m.voxel_ids.iter().find(|v| !pos.contains_key(v)) {
        return Err(Error::UnknownVoxel(*v));
    }
    let keep: BTreeSet<u32> = m.voxel_ids.iter().copied().collect();
    let cols: Vec<usize> = b
        .voxel_ids()
        .iter()
        .enumerate()
        .filter(|(_, v)| keep.contains(v))
        .map(|(i, _)| i)
        .collect();
    Ok(b.select_columns(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn table_sizes() {
        assert_eq!(load_roi_definition(RoiName::HighLevelVisual).unwrap().len(), 14);
        assert_eq!(load_roi_definition(RoiName::LowLevelVisual).unwrap().len(), 18);
        let lang = load_roi_definition(RoiName::Language).unwrap();
        assert_eq!(lang.len(), 12);
        assert!(lang.iter().all(|l| l.hemisphere == Hemisphere::L));
        assert!(lang.iter().any(|l| l.label_id == 25 && l.description == "Angular gyrus"));
    }

    #[test]
    fn specific_rows_present() {
        let low = load_roi_definition(RoiName::LowLevelVisual).unwrap();
        assert!(low
            .iter()
            .any(|l| l.hemisphere == L && l.label_id == 42 && l.description == "Occipital pole"));
        let high = load_roi_definition(RoiName::HighLevelVisual).unwrap();
        assert!(high.iter().any(|l| l.hemisphere == L && l.label_id == 21));
        assert!(high.iter().any(|l| l.hemisphere == R && l.label_id == 21));
    }

    #[test]
    fn unknown_names() {
        assert!(matches!("visual".parse::<RoiName>(), Err(Error::UnknownRoi(_))));
        assert!(load_roi_definition(RoiName::Custom).is_err());
        assert_eq!("language".parse::<RoiName>().unwrap(), RoiName::Language);
    }

    #[test]
    fn named_definitions_are_label_disjoint() {
        let sets: Vec<BTreeSet<(Hemisphere, u32)>> = RoiName::NAMED
            .iter()
            .map(|n| {
                load_roi_definition(*n)
                    .unwrap()
                    .iter()
                    .map(|l| (l.hemisphere, l.label_id))
                    .collect()
            })
            .collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn mask_collects_matching_voxels() {
        let mut atlas = AtlasAssignment::default();
        for v in 0..100 {
            atlas.insert(v, L, 42);
        }
        atlas.insert(100, R, 1);
        let m = named_mask(RoiName::LowLevelVisual, &atlas).unwrap();
        assert_eq!(m.voxel_ids, (0..100).collect::<Vec<_>>());
        assert!(matches!(
            named_mask(RoiName::HighLevelVisual, &atlas),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn atlas_tsv_parses_with_header_and_names() {
        let a = AtlasAssignment::parse("voxel_id\tlabel\n0\tL 42\n1\tR 21\tfusiform\n").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.voxels[&0].label_name, "Pole_occipital");
        assert_eq!(a.voxels[&1].label_name, "fusiform");
        assert_eq!(AtlasAssignment::parse(&a.to_tsv()).unwrap().len(), 2);
        assert!(AtlasAssignment::parse("0\tX 1\n").is_err());
    }

    fn betas() -> BetaMatrix {
        BetaMatrix::new(
            DMatrix::from_fn(2, 5, |r, c| (r * 5 + c) as f32),
            vec!["a".into(), "b".into()],
            vec![10, 11, 12, 13, 14],
        )
        .unwrap()
    }

    #[test]
    fn apply_mask_restricts_and_is_idempotent() {
        let m = RoiMask {
            name: RoiName::Custom,
            voxel_ids: vec![11, 14],
            source_labels: vec![],
        };
        let b = apply_mask(&betas(), &m).unwrap();
        assert_eq!(b.voxel_ids(), &[11, 14]);
        assert_eq!(b.values()[(1, 1)], 9.0);
        assert_eq!(apply_mask(&b, &m).unwrap(), b);
        let full = RoiMask {
            voxel_ids: vec![10, 11, 12, 13, 14],
            ..m.clone()
        };
        assert_eq!(apply_mask(&betas(), &full).unwrap(), betas());
        let bad = RoiMask {
            voxel_ids: vec![99],
            ..m
        };
        assert!(matches!(apply_mask(&betas(), &bad), Err(Error::UnknownVoxel(99))));
    }

    #[test]
    fn custom_label_file() {
        let l = parse_custom_labels("# mine\nL 42 Pole\nR\t21\n").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!((l[1].hemisphere, l[1].label_id), (R, 21));
    }
}
