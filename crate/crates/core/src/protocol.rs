//! Support/query split manifests and episode construction for meta-training
//! and meta-testing.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::raster::{read_pgm, read_ppm};
use crate::taxonomy::{merge_unsupported, relabel_for_training, ClassId, FoldSplit, LabelMask, BACKGROUND};
use crate::tensor::Tensor;

/// An image with its fine-grained label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub s_train: Vec<ManifestEntry>,
    pub q_train: Vec<ManifestEntry>,
    pub s_test: Vec<ManifestEntry>,
    pub q_test: Vec<ManifestEntry>,
}

/// On-disk split description. Paths are relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub fold: u8,
    pub splits: Splits,
    pub fixed_supports: Vec<String>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut paths = HashSet::new();
        let lists = [&self.splits.s_train, &self.splits.q_train, &self.splits.s_test, &self.splits.q_test];
        for e in lists.into_iter().flatten() {
            if !ids.insert(e.id.as_str()) {
                return Err(config_err!("manifest id {} appears twice", e.id));
            }
            if !paths.insert(e.image.as_str()) || !paths.insert(e.mask.as_str()) {
                return Err(config_err!("manifest entry {} reuses a file path", e.id));
            }
        }
        for id in &self.fixed_supports {
            if !self.splits.s_test.iter().any(|e| &e.id == id) {
                return Err(config_err!("fixed support {id} is not in s_test"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn fixed_support_indices(&self) -> Result<Vec<usize>> {
        self.fixed_supports
            .iter()
            .map(|id| {
                self.splits
                    .s_test
                    .iter()
                    .position(|e| &e.id == id)
                    .ok_or_else(|| config_err!("fixed support {id} is not in s_test"))
            })
            .collect()
    }
}

/// Indices of the `n` masks with the most distinct annotated classes, ties broken by position.
pub fn select_fixed_supports(masks: &[LabelMask], n: usize) -> Vec<usize> {
    let mut ranked: Vec<(usize, usize)> = masks.iter().map(|m| m.classes_present().len()).enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(i, _)| i).collect()
}

/// All four splits loaded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub s_train: Vec<Sample>,
    pub q_train: Vec<Sample>,
    pub s_test: Vec<Sample>,
    pub q_test: Vec<Sample>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = SplitManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let load = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
            entries
                .iter()
                .map(|e| {
                    let image = read_ppm(&root.join(&e.image))?;
                    let mask = read_pgm(&root.join(&e.mask))?;
                    let (h, w, _) = image.dims3()?;
                    if (mask.height(), mask.width()) != (h, w) {
                        return Err(Error::Format(format!("{}: image and mask sizes differ", e.id)));
                    }
                    Ok(Sample { image, mask })
                })
                .collect()
        };
        Ok(Dataset {
            s_train: load(&manifest.splits.s_train)?,
            q_train: load(&manifest.splits.q_train)?,
            s_test: load(&manifest.splits.s_test)?,
            q_test: load(&manifest.splits.q_test)?,
            manifest,
        })
    }
}

/// One support/query pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_image: Tensor,
    pub support_mask: LabelMask,
    pub query_image: Tensor,
    /// Absent when the query is unlabelled.
    pub query_mask: Option<LabelMask>,
    pub support_index: usize,
    pub query_index: usize,
}

impl Episode {
    /// Classes annotated in the support mask, plus background.
    pub fn effective_class_set(&self) -> BTreeSet<ClassId> {
        let mut s = self.support_mask.classes_present();
        s.insert(BACKGROUND);
        s
    }

    /// Foreground classes of the support, ascending.
    pub fn foreground_classes(&self) -> Vec<ClassId> {
        self.support_mask.foreground_classes()
    }
}

/// Draw one training pair uniformly, with novel classes merged into background
/// and query classes the support lacks merged as well.
pub fn sample_train_episode<R: Rng + ?Sized>(data: &Dataset, fold: &FoldSplit, rng: &mut R) -> Result<Episode> {
    if data.s_train.is_empty() || data.q_train.is_empty() {
        return Err(config_err!("training splits must be non-empty"));
    }
    let si = rng.gen_range(0..data.s_train.len());
    let qi = rng.gen_range(0..data.q_train.len());
    Ok(train_episode(data, fold, si, qi))
}

pub fn train_episode(data: &Dataset, fold: &FoldSplit, si: usize, qi: usize) -> Episode {
    let (s, q) = (&data.s_train[si], &data.q_train[qi]);
    let support_mask = relabel_for_training(&s.mask, &fold.base);
    let support_classes = {
        let mut c = support_mask.classes_present();
        c.insert(BACKGROUND);
        c
    };
    let query_mask = merge_unsupported(&relabel_for_training(&q.mask, &fold.base), &support_classes);
    Episode {
        support_image: s.image.clone(),
        support_mask,
        query_image: q.image.clone(),
        query_mask: Some(query_mask),
        support_index: si,
        query_index: qi,
    }
}

/// Every test query paired with every fixed support, query-major.
/// Support masks keep their full annotations; query masks have
/// support-absent classes merged into background.
pub fn enumerate_test_episodes(data: &Dataset) -> Result<Vec<Episode>> {
    let supports = data.manifest.fixed_support_indices()?;
    let mut out = Vec::with_capacity(data.q_test.len() * supports.len());
    for (qi, q) in data.q_test.iter().enumerate() {
        for &si in &supports {
            let s = &data.s_test[si];
            let mut classes = s.mask.classes_present();
            classes.insert(BACKGROUND);
            out.push(Episode {
                support_image: s.image.clone(),
                support_mask: s.mask.clone(),
                query_image: q.image.clone(),
                query_mask: Some(merge_unsupported(&q.mask, &classes)),
                support_index: si,
                query_index: qi,
            });
        }
    }
    Ok(out)
}

/// Number of test episodes without materialising them.
pub fn test_episode_count(manifest: &SplitManifest) -> usize {
    manifest.splits.q_test.len() * manifest.fixed_supports.len()
}
