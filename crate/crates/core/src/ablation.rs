//! The six-row component ablation: AGM only, NCM only, fixed-weight DML, DML
//! with weight shifting, plus progressive infusion, plus dynamic prototypes.
//! Every row is trained and evaluated (k-way) for each seed; orderings are
//! checked on the per-row medians.

use std::time::Instant;

use crate::error::Result;
use crate::eval::{run_meta_test, EvalMode};
use crate::exec;
use crate::pipeline::{HeadMix, ModelConfig, PipelineState};
use crate::protocol::Dataset;
use crate::taxonomy::FoldSplit;
use crate::train::{train_stage, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub head: HeadMix,
    pub kim: bool,
    pub dynamic: bool,
}

pub const ROWS: [AblationRow; 6] = [
    AblationRow { name: "AGM", head: HeadMix::Agm, kim: false, dynamic: false },
    AblationRow { name: "NCM", head: HeadMix::Ncm, kim: false, dynamic: false },
    AblationRow { name: "DML", head: HeadMix::Fixed(0.5), kim: false, dynamic: false },
    AblationRow { name: "DML+WS", head: HeadMix::Shifted, kim: false, dynamic: false },
    AblationRow { name: "DML+WS+KIM", head: HeadMix::Shifted, kim: true, dynamic: false },
    AblationRow { name: "DML+WS+KIM+DP", head: HeadMix::Shifted, kim: true, dynamic: true },
];

impl AblationRow {
    /// `base` with this row's head and switches; everything else is shared.
    pub fn model(&self, base: &ModelConfig, seed: u64) -> ModelConfig {
        ModelConfig { head: self.head, use_kim: self.kim, dynamic_prototypes: self.dynamic, init_seed: seed, ..base.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub row: &'static str,
    pub seed: u64,
    pub novel_miou: f64,
    pub human_miou: f64,
    pub agm_loss_calls: usize,
    pub ncm_loss_calls: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Novel,
    Human,
}

/// `rhs − lhs ≥ min_gap` on one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub metric: Metric,
    pub lhs: &'static str,
    pub rhs: &'static str,
    pub min_gap: f64,
}

impl Check {
    pub fn label(&self) -> String {
        let m = match self.metric {
            Metric::Novel => "novel",
            Metric::Human => "human",
        };
        format!("{m}: {} + {:.0} <= {}", self.lhs, 100.0 * self.min_gap, self.rhs)
    }
}

/// The orderings the ablation is expected to reproduce.
pub fn expected_orderings() -> Vec<Check> {
    let novel = |lhs, rhs| Check { metric: Metric::Novel, lhs, rhs, min_gap: 0.01 };
    vec![
        novel("AGM", "DML"),
        novel("NCM", "DML"),
        novel("DML", "DML+WS"),
        novel("DML+WS", "DML+WS+KIM"),
        novel("DML+WS+KIM", "DML+WS+KIM+DP"),
        Check { metric: Metric::Human, lhs: "DML+WS", rhs: "DML+WS+KIM", min_gap: 0.02 },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub check: Check,
    /// Median gap `rhs − lhs`.
    pub gap: f64,
    pub passed: bool,
    pub violating_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub results: Vec<RowResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationReport {
    fn value(r: &RowResult, metric: Metric) -> f64 {
        match metric {
            Metric::Novel => r.novel_miou,
            Metric::Human => r.human_miou,
        }
    }

    pub fn get(&self, row: &str, seed: u64) -> Option<&RowResult> {
        self.results.iter().find(|r| r.row == row && r.seed == seed)
    }

    pub fn median(&self, row: &str, metric: Metric) -> f64 {
        median(self.results.iter().filter(|r| r.row == row).map(|r| Self::value(r, metric)).collect())
    }

    pub fn outcomes(&self) -> Vec<CheckOutcome> {
        expected_orderings()
            .into_iter()
            .map(|check| {
                let gap = self.median(check.rhs, check.metric) - self.median(check.lhs, check.metric);
                let violating_seeds = self
                    .seeds
                    .iter()
                    .copied()
                    .filter(|&s| match (self.get(check.lhs, s), self.get(check.rhs, s)) {
                        (Some(l), Some(r)) => Self::value(r, check.metric) - Self::value(l, check.metric) < check.min_gap,
                        _ => true,
                    })
                    .collect();
                CheckOutcome { passed: gap >= check.min_gap, gap, check, violating_seeds }
            })
            .collect()
    }

    pub fn reproduced(&self) -> bool {
        self.outcomes().iter().all(|o| o.passed)
    }

    /// Per-seed rows followed by one `median` row per configuration.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,seed,novel_miou,human_miou\n");
        for r in &self.results {
            s.push_str(&format!("{},{},{:.6},{:.6}\n", r.row, r.seed, r.novel_miou, r.human_miou));
        }
        for row in ROWS {
            s.push_str(&format!("{},median,{:.6},{:.6}\n", row.name, self.median(row.name, Metric::Novel), self.median(row.name, Metric::Human)));
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<16}{:>12}{:>12}\n", "config", "novel MIoU", "human MIoU");
        for row in ROWS {
            s.push_str(&format!(
                "{:<16}{:>12.2}{:>12.2}\n",
                row.name,
                100.0 * self.median(row.name, Metric::Novel),
                100.0 * self.median(row.name, Metric::Human)
            ));
        }
        s
    }

    /// One line per expected ordering, then an overall line.
    pub fn verdict(&self) -> String {
        let mut s = String::new();
        for o in self.outcomes() {
            let status = if o.passed { "ok" } else { "VIOLATED" };
            s.push_str(&format!("{status:<9}{} (median gap {:+.2})", o.check.label(), 100.0 * o.gap));
            if !o.violating_seeds.is_empty() {
                s.push_str(&format!("; violated by seed(s) {:?}", o.violating_seeds));
            }
            s.push('\n');
        }
        s.push_str(if self.reproduced() { "verdict: ordering reproduced\n" } else { "verdict: ordering NOT reproduced\n" });
        s
    }
}

fn train_row(mut state: PipelineState, data: &Dataset, fold: &FoldSplit, train: &TrainConfig) -> Result<(PipelineState, usize, usize)> {
    let (mut agm, mut ncm) = (0, 0);
    for stage in state.required_stages() {
        if state.trained[stage as usize - 1] {
            continue;
        }
        let rep = train_stage(&mut state, stage, data, fold, train)?;
        agm += rep.agm_loss_calls;
        ncm += rep.ncm_loss_calls;
    }
    Ok((state, agm, ncm))
}

/// Train and evaluate every row for every seed. The stage-1 foreground
/// parser does not depend on the head or prototype switches, so the two
/// infusion rows of a seed share one trained copy.
pub fn run_ablation(data: &Dataset, fold: &FoldSplit, base: &ModelConfig, train: &TrainConfig, seeds: &[u64], parallel: bool) -> Result<AblationReport> {
    base.validate()?;
    train.validate()?;
    let mut results = Vec::new();
    for &seed in seeds {
        let tcfg = TrainConfig { seed, ..train.clone() };
        let started = Instant::now();
        let mut shared = PipelineState::new(ROWS[4].model(base, seed))?;
        train_stage(&mut shared, 1, data, fold, &tcfg)?;
        let stage1 = shared.stage1.clone();
        let rows: Vec<Result<RowResult>> = exec::map(&ROWS, parallel, |row| {
            let mut state = PipelineState::new(row.model(base, seed))?;
            if row.kim {
                state.stage1 = stage1.clone();
                state.trained[0] = true;
            }
            let (state, agm_loss_calls, ncm_loss_calls) = train_row(state, data, fold, &tcfg)?;
            let (rep, _) = run_meta_test(&state, data, fold, EvalMode::KWay, false)?;
            log::info!("seed {seed} {}: novel {:.2} human {:.2}", row.name, 100.0 * rep.novel_miou, 100.0 * rep.human_miou);
            Ok(RowResult { row: row.name, seed, novel_miou: rep.novel_miou, human_miou: rep.human_miou, agm_loss_calls, ncm_loss_calls })
        });
        for r in rows {
            results.push(r?);
        }
        log::info!("seed {seed} finished in {:.1}s", started.elapsed().as_secs_f64());
    }
    Ok(AblationReport { seeds: seeds.to_vec(), results })
}
