use super::config::{GranularityMode, ModelConfig, TrainConfig};
use super::evaluate::{evaluate_model, Evaluation};
use super::train::{train_observed, EpochLog, TrainOutcome};
use crate::error::Result;
use crate::fusion::Backbone;
use crate::icegrid::{chronological_split, SampleSplit, SicSeries};

/// One cell of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCase {
    pub mode: GranularityMode,
    pub backbone: Backbone,
}

impl AblationCase {
    pub fn label(&self) -> String {
        format!("{}_{}", self.mode.name(), self.backbone.name())
    }
}

/// Multi-granularity and the three single-granularity modes with the
/// variate backbone, then the two alternative backbones in multi mode.
pub const DEFAULT_MATRIX: [AblationCase; 6] = [
    AblationCase { mode: GranularityMode::Multi, backbone: Backbone::Variate },
    AblationCase { mode: GranularityMode::DailyOnly, backbone: Backbone::Variate },
    AblationCase { mode: GranularityMode::WeeklyOnly, backbone: Backbone::Variate },
    AblationCase { mode: GranularityMode::MonthlyOnly, backbone: Backbone::Variate },
    AblationCase { mode: GranularityMode::Multi, backbone: Backbone::Temporal },
    AblationCase { mode: GranularityMode::Multi, backbone: Backbone::Mixer },
];

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub case: AblationCase,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub split: SampleSplit,
    pub runs: Vec<AblationRun>,
}

impl Ablation {
    pub fn run(&self, case: AblationCase) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.case == case)
    }
}

/// Trains and tests every case on one shared split with one seed.
/// `progress` is called after each run.
pub fn run_ablation(
    series: &SicSeries,
    model: &ModelConfig,
    train: &TrainConfig,
    cases: &[AblationCase],
    progress: impl FnMut(&AblationRun),
) -> Result<Ablation> {
    run_ablation_observed(series, model, train, cases, |_, _| {}, progress)
}

/// [`run_ablation`] with an extra callback after every epoch of every run.
pub fn run_ablation_observed(
    series: &SicSeries,
    model: &ModelConfig,
    train: &TrainConfig,
    cases: &[AblationCase],
    mut on_epoch: impl FnMut(AblationCase, &EpochLog),
    mut progress: impl FnMut(&AblationRun),
) -> Result<Ablation> {
    let split = chronological_split(series, train.anchor_stride)?;
    let mut runs = Vec::with_capacity(cases.len());
    for &case in cases {
        let mut m = model.clone();
        m.fusion.backbone = case.backbone;
        let t = TrainConfig { granularity_mode: case.mode, ..train.clone() };
        let outcome = train_observed(series, &split, &m, &t, |e| on_epoch(case, e))?;
        let evaluation = evaluate_model(&outcome.params, &outcome.model, series, &split.test)?;
        let run = AblationRun { case, outcome, evaluation };
        progress(&run);
        runs.push(run);
    }
    Ok(Ablation { split, runs })
}
