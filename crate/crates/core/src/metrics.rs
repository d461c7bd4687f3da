//! Confusion counting and the segmentation metrics built on it.

use std::collections::BTreeSet;

use crate::error::{contract_err, shape_err, Result};
use crate::taxonomy::{ClassId, LabelMask};

/// `counts[gt][pred]` over a fixed, sorted list of classes. Pixels whose ground
/// truth or prediction lies outside the list are not counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: Vec<ClassId>,
    index: [Option<usize>; 256],
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: &BTreeSet<ClassId>) -> Self {
        let classes: Vec<ClassId> = classes.iter().copied().collect();
        let mut index = [None; 256];
        for (i, &c) in classes.iter().enumerate() {
            index[c as usize] = Some(i);
        }
        let n = classes.len();
        Confusion { classes, index, counts: vec![0; n * n] }
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(shape_err!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ));
        }
        let n = self.classes.len();
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            if let (Some(pi), Some(ti)) = (self.index[p as usize], self.index[t as usize]) {
                self.counts[ti * n + pi] += 1;
            }
        }
        Ok(())
    }

    pub fn get(&self, gt: ClassId, pred: ClassId) -> u64 {
        match (self.index[gt as usize], self.index[pred as usize]) {
            (Some(t), Some(p)) => self.counts[t * self.classes.len() + p],
            _ => 0,
        }
    }

    /// Add another matrix over the same classes.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.classes != other.classes {
            return Err(contract_err!("cannot merge confusions over different class lists"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        let n = self.classes.len();
        (0..n).map(|i| self.counts[i * n + i]).sum()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in either.
    pub fn iou(&self, class: ClassId) -> Option<f64> {
        let i = self.index[class as usize]?;
        let n = self.classes.len();
        let tp = self.counts[i * n + i];
        let fn_: u64 = (0..n).map(|p| self.counts[i * n + p]).sum::<u64>() - tp;
        let fp: u64 = (0..n).map(|t| self.counts[t * n + i]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask, classes: &BTreeSet<ClassId>) -> Result<Confusion> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    Ok(c)
}

/// Mean IoU over `classes`, skipping classes that never occur. Zero when none occur.
pub fn miou(conf: &Confusion, classes: &BTreeSet<ClassId>) -> Result<f64> {
    if classes.is_empty() {
        return Err(contract_err!("miou over an empty class set"));
    }
    let ious: Vec<f64> = classes.iter().filter_map(|&c| conf.iou(c)).collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mean of foreground and background IoU of a two-class confusion.
pub fn binary_iou(conf: &Confusion) -> Result<f64> {
    if conf.classes().len() != 2 {
        return Err(contract_err!("binary_iou needs a two-class confusion, got {} classes", conf.classes().len()));
    }
    let set: BTreeSet<ClassId> = conf.classes().iter().copied().collect();
    miou(conf, &set)
}

/// Fraction of counted pixels on the diagonal; zero for an empty matrix.
pub fn overall_accuracy(conf: &Confusion) -> f64 {
    match conf.total() {
        0 => 0.0,
        t => conf.trace() as f64 / t as f64,
    }
}
