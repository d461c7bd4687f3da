//! Meta-test harness: k-way and one-way evaluation over the fixed test episodes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dml::PrototypeSource;
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{binary_iou, miou, overall_accuracy, Confusion};
use crate::pipeline::{decode_prediction, features_tensor, meta_heads, mix_heads, HeadsNeeded, PipelineState};
use crate::protocol::Dataset;
use crate::taxonomy::{merge_unsupported, to_foreground, ClassId, ClassTaxonomy, FoldSplit, Granularity, LabelMask, BACKGROUND, FOREGROUND};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    KWay,
    OneWay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub fold: u8,
    pub episodes: usize,
    pub novel_miou: f64,
    pub human_miou: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bi_iou: Option<f64>,
    /// IoU per evaluated class name; classes that never occurred are omitted.
    pub per_class_iou: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = format!("mode {:?}, fold {}, {} episodes\n", self.mode, self.fold, self.episodes);
        s.push_str(&format!("  novel MIoU   {:6.2}\n  human MIoU   {:6.2}\n", 100.0 * self.novel_miou, 100.0 * self.human_miou));
        if let Some(a) = self.overall_acc {
            s.push_str(&format!("  overall acc  {:6.2}\n", 100.0 * a));
        }
        if let Some(b) = self.bi_iou {
            s.push_str(&format!("  Bi-IoU       {:6.2}\n", 100.0 * b));
        }
        for (name, v) in &self.per_class_iou {
            s.push_str(&format!("    {name:<14}{:6.2}\n", 100.0 * v));
        }
        s
    }
}

/// One evaluated (query, support[, class]) prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub query: usize,
    pub support: usize,
    pub class: Option<ClassId>,
    pub correct: u64,
    pub total: u64,
}

pub fn episodes_csv(records: &[EpisodeRecord]) -> String {
    let mut s = String::from("episode,query,support,class,pixel_accuracy\n");
    for r in records {
        let class = r.class.map(|c| c.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.episode, r.query, r.support, class, r.correct as f64 / r.total.max(1) as f64));
    }
    s
}

/// Anything that parses a test query given a support index and support mask.
pub trait EpisodePredictor: Sync {
    fn predict(&self, support: usize, query: usize, support_mask: &LabelMask) -> Result<LabelMask>;
}

/// Trained pipeline with stage-3 features of every test image computed once.
pub struct PipelinePredictor<'a> {
    state: &'a PipelineState,
    support_features: BTreeMap<usize, Tensor>,
    query_features: Vec<Tensor>,
    base: BTreeSet<ClassId>,
    use_bank: bool,
    beta: f64,
    size: (usize, usize),
}

impl<'a> PipelinePredictor<'a> {
    pub fn new(state: &'a PipelineState, data: &Dataset, fold: &FoldSplit, parallel: bool) -> Result<Self> {
        let supports = data.manifest.fixed_support_indices()?;
        let sf: Vec<Result<Tensor>> = exec::map(&supports, parallel, |&i| features_tensor(state, 3, &data.s_test[i].image));
        let support_features = supports.iter().copied().zip(sf.into_iter().collect::<Result<Vec<_>>>()?).collect();
        let query_features = exec::map(&data.q_test, parallel, |q| features_tensor(state, 3, &q.image)).into_iter().collect::<Result<Vec<_>>>()?;
        let (h, w) = data.q_test.first().map(|q| (q.mask.height(), q.mask.width())).unwrap_or((0, 0));
        let bank = &state.stage3.bank;
        let wants_bank = state.config.dynamic_prototypes && state.config.base_from_bank;
        let use_bank = wants_bank && fold.base.iter().all(|&c| bank.is_initialized(c));
        if wants_bank && !use_bank {
            log::warn!("prototype bank does not cover every base class; using static prototypes");
        }
        Ok(PipelinePredictor {
            state,
            support_features,
            query_features,
            base: fold.base.clone(),
            use_bank,
            beta: state.config.head.inference_beta(),
            size: (h, w),
        })
    }
}

impl EpisodePredictor for PipelinePredictor<'_> {
    fn predict(&self, support: usize, query: usize, support_mask: &LabelMask) -> Result<LabelMask> {
        let sf = self.support_features.get(&support).ok_or_else(|| Error::State(format!("support {support} is not a fixed support")))?;
        let qf = &self.query_features[query];
        let (fh, fw, _) = sf.dims3()?;
        let low = support_mask.resize_nearest(fh, fw);
        let (h, w) = self.size;
        if low.foreground_classes().is_empty() {
            return LabelMask::filled(h, w, BACKGROUND, Granularity::Fine);
        }
        let mut g = Graph::new();
        let head = self.state.stage3.head.bind(&mut g, false);
        let s = g.constant(sf.clone());
        let q = g.constant(qf.clone());
        let source = if self.use_bank { PrototypeSource::Frozen(&self.state.stage3.bank) } else { PrototypeSource::Static };
        let Some(out) = meta_heads(&mut g, &head, s, &low, q, source, &self.base, HeadsNeeded::for_beta(self.beta), self.state.config.ncm_scale)? else {
            return LabelMask::filled(h, w, BACKGROUND, Granularity::Fine);
        };
        let probs = mix_heads(&g, &out, self.beta)?;
        decode_prediction(&probs, &out.channels, h, w, Granularity::Fine)
    }
}

fn restrict(mask: &LabelMask, class: ClassId) -> LabelMask {
    mask.map(mask.granularity(), |l| if l == class { class } else { BACKGROUND })
}

struct QueryResult {
    records: Vec<EpisodeRecord>,
    kway: Option<Confusion>,
    binary: Option<Confusion>,
    per_class: BTreeMap<ClassId, Confusion>,
}

/// Evaluate any predictor over `|Q_test| × |supports|` episodes. Confusions are
/// integer counts merged in query order, so the result does not depend on
/// scheduling.
pub fn evaluate(data: &Dataset, fold: &FoldSplit, mode: EvalMode, predictor: &dyn EpisodePredictor, parallel: bool) -> Result<(MetricsReport, Vec<EpisodeRecord>)> {
    let taxonomy = ClassTaxonomy::standard();
    let human = taxonomy.human_classes();
    let supports = data.manifest.fixed_support_indices()?;
    let per_query = |qi: usize| -> Result<QueryResult> {
        let q = &data.q_test[qi];
        let mut res = QueryResult { records: Vec::new(), kway: None, binary: None, per_class: BTreeMap::new() };
        for (k, &si) in supports.iter().enumerate() {
            let smask = &data.s_test[si].mask;
            let episode = qi * supports.len() + k;
            match mode {
                EvalMode::KWay => {
                    let mut classes = smask.classes_present();
                    classes.insert(BACKGROUND);
                    let gt = merge_unsupported(&q.mask, &classes);
                    let pred = predictor.predict(si, qi, smask)?;
                    let conf = res.kway.get_or_insert_with(|| Confusion::new(&human));
                    conf.add(&pred, &gt)?;
                    let correct = pred.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count() as u64;
                    res.records.push(EpisodeRecord { episode, query: qi, support: si, class: None, correct, total: gt.len() as u64 });
                }
                EvalMode::OneWay => {
                    for class in smask.foreground_classes() {
                        let gt = restrict(&q.mask, class);
                        let pred = restrict(&predictor.predict(si, qi, &restrict(smask, class))?, class);
                        let pair: BTreeSet<ClassId> = [BACKGROUND, class].into_iter().collect();
                        res.per_class.entry(class).or_insert_with(|| Confusion::new(&pair)).add(&pred, &gt)?;
                        let fg: BTreeSet<ClassId> = [BACKGROUND, FOREGROUND].into_iter().collect();
                        res.binary.get_or_insert_with(|| Confusion::new(&fg)).add(&to_foreground(&pred), &to_foreground(&gt))?;
                        let correct = pred.labels().iter().zip(gt.labels()).filter(|(a, b)| a == b).count() as u64;
                        res.records.push(EpisodeRecord { episode, query: qi, support: si, class: Some(class), correct, total: gt.len() as u64 });
                    }
                }
            }
        }
        Ok(res)
    };
    let results = exec::map_range(data.q_test.len(), parallel, per_query);
    let mut records = Vec::new();
    let mut kway = Confusion::new(&human);
    let mut binary = Confusion::new(&[BACKGROUND, FOREGROUND].into_iter().collect());
    let mut per_class: BTreeMap<ClassId, Confusion> = BTreeMap::new();
    for r in results {
        let r = r?;
        records.extend(r.records);
        if let Some(c) = r.kway {
            kway.merge(&c)?;
        }
        if let Some(c) = r.binary {
            binary.merge(&c)?;
        }
        for (class, c) in r.per_class {
            match per_class.get_mut(&class) {
                Some(acc) => acc.merge(&c)?,
                None => {
                    per_class.insert(class, c);
                }
            }
        }
    }
    let report = match mode {
        EvalMode::KWay => {
            let per_class_iou = human.iter().filter_map(|&c| kway.iou(c).map(|v| (taxonomy.name(c).to_string(), v))).collect();
            MetricsReport {
                mode,
                fold: fold.fold,
                episodes: records.len(),
                novel_miou: miou(&kway, &fold.novel)?,
                human_miou: miou(&kway, &human)?,
                overall_acc: Some(overall_accuracy(&kway)),
                bi_iou: None,
                per_class_iou,
            }
        }
        EvalMode::OneWay => {
            let ious: BTreeMap<ClassId, f64> = per_class.iter().filter_map(|(&c, conf)| conf.iou(c).map(|v| (c, v))).collect();
            let mean = |pick: &dyn Fn(ClassId) -> bool| {
                let v: Vec<f64> = ious.iter().filter(|(c, _)| pick(**c)).map(|(_, v)| *v).collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            MetricsReport {
                mode,
                fold: fold.fold,
                episodes: records.len(),
                novel_miou: mean(&|c| fold.novel.contains(&c)),
                human_miou: mean(&|_| true),
                overall_acc: None,
                bi_iou: Some(if binary.total() == 0 { 0.0 } else { binary_iou(&binary)? }),
                per_class_iou: ious.iter().map(|(&c, &v)| (taxonomy.name(c).to_string(), v)).collect(),
            }
        }
    };
    Ok((report, records))
}

/// Evaluate a trained pipeline on the test splits.
pub fn run_meta_test(state: &PipelineState, data: &Dataset, fold: &FoldSplit, mode: EvalMode, parallel: bool) -> Result<(MetricsReport, Vec<EpisodeRecord>)> {
    for s in state.required_stages() {
        if !state.trained[s as usize - 1] {
            return Err(Error::State(format!("stage {s} is not trained")));
        }
    }
    let predictor = PipelinePredictor::new(state, data, fold, parallel)?;
    evaluate(data, fold, mode, &predictor, parallel)
}
