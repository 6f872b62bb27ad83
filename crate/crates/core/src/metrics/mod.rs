//! Leakage measurement: speaker encoder, trial scoring, detection metrics,
//! projection and the condition report.

pub mod detection;
pub mod encoder;
pub mod projection;
pub mod report;
pub mod trials;

pub use detection::{cllr, cllr_act, eer, min_dcf, operating_points, pav, pav_llrs, OperatingPoint, P_TARGET};
pub use encoder::{load_encoder, save_encoder, train_speaker_encoder, SpeakerEncoder, SvConfig, SvExample};
pub use projection::{principal_directions, project_2d, Projected};
pub use report::{build_report, MetricReport, ReportBundle};
pub use trials::{score_trials, ScoredTrial, Trial, TrialLabel, TrialScoreSet};
