//! The three-level human label hierarchy (fine class, parent area, foreground),
//! cluster-disjoint folds and the mask relabelling rules built on them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};

pub type ClassId = u8;

pub const BACKGROUND: ClassId = 0;
pub const FOREGROUND: ClassId = 1;

pub const HAT: ClassId = 1;
pub const HAIR: ClassId = 2;
pub const FACE: ClassId = 3;
pub const UPPER_CLOTHES: ClassId = 4;
pub const DRESS: ClassId = 5;
pub const BELT: ClassId = 6;
pub const BAG: ClassId = 7;
pub const ARMS: ClassId = 8;
pub const PANTS: ClassId = 9;
pub const LEGS: ClassId = 10;
pub const SHOES: ClassId = 11;

pub const AREA_HEAD: ClassId = 1;
pub const AREA_BODY: ClassId = 2;
pub const AREA_ARMS: ClassId = 3;
pub const AREA_LEGS: ClassId = 4;

const FINE_NAMES: [&str; 12] = [
    "background",
    "hat",
    "hair",
    "face",
    "upper-clothes",
    "dress",
    "belt",
    "bag",
    "arms",
    "pants",
    "legs",
    "shoes",
];
const AREA_NAMES: [&str; 5] = ["background", "head", "body", "arms", "legs"];

/// Which label space a [`LabelMask`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    Fine,
    Parent,
    Foreground,
}

impl Granularity {
    pub fn max_id(self) -> ClassId {
        match self {
            Granularity::Fine => SHOES,
            Granularity::Parent => AREA_LEGS,
            Granularity::Foreground => FOREGROUND,
        }
    }
}

/// H×W raster of class ids in one label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<ClassId>,
    granularity: Granularity,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<ClassId>, granularity: Granularity) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(shape_err!("mask {height}x{width} cannot hold {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > granularity.max_id()) {
            return Err(shape_err!("label {bad} is not in the {granularity:?} class set"));
        }
        Ok(LabelMask { height, width, labels, granularity })
    }

    pub fn filled(height: usize, width: usize, id: ClassId, granularity: Granularity) -> Result<Self> {
        LabelMask::new(height, width, vec![id; height * width], granularity)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.labels[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct ids present, background included when present.
    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// Foreground ids present, ascending.
    pub fn foreground_classes(&self) -> Vec<ClassId> {
        self.classes_present().into_iter().filter(|&c| c != BACKGROUND).collect()
    }

    pub fn count(&self, id: ClassId) -> usize {
        self.labels.iter().filter(|&&l| l == id).count()
    }

    pub fn binary(&self, id: ClassId) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    pub fn map(&self, granularity: Granularity, f: impl Fn(ClassId) -> ClassId) -> LabelMask {
        let labels = self.labels.iter().map(|&l| f(l)).collect();
        LabelMask::new(self.height, self.width, labels, granularity).expect("label map produced out-of-set ids")
    }

    /// Nearest-neighbour resample; never invents ids.
    pub fn resize_nearest(&self, new_h: usize, new_w: usize) -> LabelMask {
        let src = |dst: usize, src_len: usize, dst_len: usize| {
            (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
        };
        let cols: Vec<usize> = (0..new_w).map(|x| src(x, self.width, new_w)).collect();
        let mut labels = Vec::with_capacity(new_h * new_w);
        for y in 0..new_h {
            let sy = src(y, self.height, new_h);
            labels.extend(cols.iter().map(|&sx| self.labels[sy * self.width + sx]));
        }
        LabelMask { height: new_h, width: new_w, labels, granularity: self.granularity }
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut labels = self.labels.clone();
        for row in labels.chunks_exact_mut(self.width) {
            row.reverse();
        }
        LabelMask { labels, ..self.clone() }
    }
}

/// Base and novel fine classes of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: u8,
    pub base: BTreeSet<ClassId>,
    pub novel: BTreeSet<ClassId>,
    /// Parent area whose children are all novel; held out at stage 2.
    pub held_out_area: ClassId,
}

impl FoldSplit {
    pub fn base_areas(&self) -> BTreeSet<ClassId> {
        [AREA_HEAD, AREA_BODY, AREA_ARMS, AREA_LEGS].into_iter().filter(|&a| a != self.held_out_area).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassTaxonomy {
    parent_of: BTreeMap<ClassId, ClassId>,
    folds: BTreeMap<u8, Vec<ClassId>>,
}

impl Default for ClassTaxonomy {
    fn default() -> Self {
        Self::standard()
    }
}

impl ClassTaxonomy {
    /// Twelve merged classes in four parent areas, with the leg-area and head-area folds.
    pub fn standard() -> Self {
        let parent_of = [
            (HAT, AREA_HEAD),
            (HAIR, AREA_HEAD),
            (FACE, AREA_HEAD),
            (UPPER_CLOTHES, AREA_BODY),
            (DRESS, AREA_BODY),
            (BELT, AREA_BODY),
            (BAG, AREA_BODY),
            (ARMS, AREA_ARMS),
            (PANTS, AREA_LEGS),
            (LEGS, AREA_LEGS),
            (SHOES, AREA_LEGS),
        ]
        .into_iter()
        .collect();
        let folds = [(1, vec![PANTS, LEGS, SHOES]), (2, vec![HAIR, FACE, HAT])].into_iter().collect();
        ClassTaxonomy { parent_of, folds }
    }

    /// Fine ids including background.
    pub fn fine_classes(&self) -> Vec<ClassId> {
        std::iter::once(BACKGROUND).chain(self.parent_of.keys().copied()).collect()
    }

    pub fn human_classes(&self) -> BTreeSet<ClassId> {
        self.fine_classes().into_iter().collect()
    }

    pub fn name(&self, id: ClassId) -> &'static str {
        FINE_NAMES.get(id as usize).copied().unwrap_or("?")
    }

    pub fn area_name(&self, id: ClassId) -> &'static str {
        AREA_NAMES.get(id as usize).copied().unwrap_or("?")
    }

    pub fn parent_of(&self, id: ClassId) -> Option<ClassId> {
        self.parent_of.get(&id).copied()
    }

    pub fn folds(&self) -> impl Iterator<Item = u8> + '_ {
        self.folds.keys().copied()
    }

    /// Every fine class has one parent and every fold's novel set lies inside one parent area.
    pub fn validate(&self) -> Result<()> {
        for fold in self.folds.keys() {
            let novel = &self.folds[fold];
            let areas: BTreeSet<_> = novel.iter().map(|c| self.parent_of(*c)).collect();
            if areas.len() != 1 || areas.contains(&None) {
                return Err(config_err!("fold {fold} novel classes span {} parent areas", areas.len()));
            }
        }
        Ok(())
    }

    pub fn select_fold(&self, fold: u8) -> Result<FoldSplit> {
        let novel_list = self.folds.get(&fold).ok_or_else(|| config_err!("unknown fold {fold}"))?;
        let novel: BTreeSet<ClassId> = novel_list.iter().copied().collect();
        let base = self.parent_of.keys().copied().filter(|c| !novel.contains(c)).collect();
        let held_out_area = self
            .parent_of(novel_list[0])
            .ok_or_else(|| config_err!("fold {fold} lists a class without a parent"))?;
        Ok(FoldSplit { fold, base, novel, held_out_area })
    }
}

/// Pixels outside `base` become background.
pub fn relabel_for_training(mask: &LabelMask, base: &BTreeSet<ClassId>) -> LabelMask {
    mask.map(mask.granularity(), |l| if base.contains(&l) { l } else { BACKGROUND })
}

/// Query ground-truth classes the support does not annotate become background.
pub fn merge_unsupported(query_gt: &LabelMask, support_classes: &BTreeSet<ClassId>) -> LabelMask {
    query_gt.map(query_gt.granularity(), |l| if support_classes.contains(&l) { l } else { BACKGROUND })
}

pub fn aggregate_to_parents(mask: &LabelMask, taxonomy: &ClassTaxonomy) -> LabelMask {
    match mask.granularity() {
        Granularity::Fine => mask.map(Granularity::Parent, |l| taxonomy.parent_of(l).unwrap_or(BACKGROUND)),
        _ => mask.clone(),
    }
}

pub fn to_foreground(mask: &LabelMask) -> LabelMask {
    mask.map(Granularity::Foreground, |l| if l == BACKGROUND { BACKGROUND } else { FOREGROUND })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fine(labels: Vec<ClassId>) -> LabelMask {
        let n = labels.len();
        LabelMask::new(1, n, labels, Granularity::Fine).unwrap()
    }

    #[test]
    fn folds_match_published_triples() {
        let t = ClassTaxonomy::standard();
        t.validate().unwrap();
        let f1 = t.select_fold(1).unwrap();
        assert_eq!(f1.novel, [PANTS, LEGS, SHOES].into_iter().collect());
        assert!(f1.base.is_disjoint(&f1.novel));
        assert_eq!(f1.held_out_area, AREA_LEGS);
        let f2 = t.select_fold(2).unwrap();
        assert_eq!(f2.novel, [HAIR, FACE, HAT].into_iter().collect());
        assert_eq!(f2.held_out_area, AREA_HEAD);
        assert!(t.select_fold(3).is_err());
        assert_eq!(t.fine_classes().len(), 12);
    }

    #[test]
    fn fold_is_partition_of_human_classes() {
        let t = ClassTaxonomy::standard();
        for fold in t.folds().collect::<Vec<_>>() {
            let s = t.select_fold(fold).unwrap();
            let mut all: BTreeSet<_> = s.base.union(&s.novel).copied().collect();
            all.insert(BACKGROUND);
            assert_eq!(all, t.human_classes());
            assert_eq!(s.base_areas().len(), 3);
        }
    }

    #[test]
    fn broken_fold_is_rejected() {
        let mut t = ClassTaxonomy::standard();
        t.folds.insert(3, vec![HAT, SHOES]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn relabel_examples() {
        let base = ClassTaxonomy::standard().select_fold(1).unwrap().base;
        let all_base = fine(vec![HAT, HAIR, ARMS, BAG]);
        assert_eq!(relabel_for_training(&all_base, &base), all_base);
        let all_novel = fine(vec![PANTS, LEGS, SHOES]);
        assert_eq!(relabel_for_training(&all_novel, &base).labels(), &[0, 0, 0]);
        let mixed = fine(vec![PANTS, FACE, 0, SHOES, DRESS]);
        let r = relabel_for_training(&mixed, &base);
        assert_eq!(r.labels(), &[0, FACE, 0, 0, DRESS]);
        assert_eq!(r.len(), mixed.len());
    }

    #[test]
    fn merge_unsupported_examples() {
        let q = fine(vec![HAT, FACE, 0, ARMS]);
        let full: BTreeSet<_> = [0, HAT, FACE, ARMS].into_iter().collect();
        assert_eq!(merge_unsupported(&q, &full), q);
        let no_hat: BTreeSet<_> = [0, FACE, ARMS].into_iter().collect();
        assert_eq!(merge_unsupported(&q, &no_hat).labels(), &[0, FACE, 0, ARMS]);
        assert_eq!(merge_unsupported(&q, &BTreeSet::new()).labels(), &[0, 0, 0, 0]);
    }

    #[test]
    fn parents_and_foreground() {
        let t = ClassTaxonomy::standard();
        let legs = fine(vec![PANTS, LEGS, SHOES]);
        assert_eq!(aggregate_to_parents(&legs, &t).labels(), &[AREA_LEGS; 3]);
        let bg = fine(vec![0, 0]);
        assert_eq!(aggregate_to_parents(&bg, &t).labels(), &[0, 0]);
        assert_eq!(to_foreground(&bg).labels(), &[0, 0]);
        let m = fine(vec![0, HAT, SHOES, 0, BELT]);
        let fg = to_foreground(&m);
        assert_eq!(fg.labels(), &[0, 1, 1, 0, 1]);
        assert_eq!(fg.granularity(), Granularity::Foreground);
    }

    #[test]
    fn label_outside_set_is_rejected() {
        assert!(LabelMask::new(1, 1, vec![12], Granularity::Fine).is_err());
        assert!(LabelMask::new(1, 1, vec![2], Granularity::Foreground).is_err());
    }

    #[test]
    fn nearest_resize_keeps_ids() {
        let m = LabelMask::new(2, 2, vec![1, 2, 3, 4], Granularity::Fine).unwrap();
        let up = m.resize_nearest(4, 4);
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(3, 3), 4);
        assert_eq!(up.resize_nearest(2, 2), m);
    }

    proptest! {
        #[test]
        fn relabel_is_idempotent(labels in proptest::collection::vec(0u8..12, 1..64), fold in 1u8..3) {
            let base = ClassTaxonomy::standard().select_fold(fold).unwrap().base;
            let m = fine(labels);
            let once = relabel_for_training(&m, &base);
            prop_assert_eq!(relabel_for_training(&once, &base), once.clone());
            prop_assert!(once.labels().iter().all(|l| *l == 0 || base.contains(l)));
        }

        #[test]
        fn hierarchy_is_consistent(labels in proptest::collection::vec(0u8..12, 1..64)) {
            let t = ClassTaxonomy::standard();
            let m = fine(labels);
            let parents = aggregate_to_parents(&m, &t);
            prop_assert!(parents.labels().iter().all(|&l| l <= AREA_LEGS));
            prop_assert_eq!(to_foreground(&parents), to_foreground(&m));
            prop_assert_eq!(to_foreground(&m).count(FOREGROUND), m.len() - m.count(BACKGROUND));
        }
    }
}
