//! Behavioral-sequence mining for app-use logs: sessionization, spell
//! sequence dissimilarities, medoid clustering, pattern ranking,
//! descriptive statistics, circadian trajectories and random-intercept
//! mixed models, plus a synthetic log generator with planted ground truth.

pub mod clusterer;
pub mod descriptives;
pub mod ingest;
pub mod mixedmodel;
pub mod patterns;
pub mod pipeline;
pub mod sessionizer;
pub mod simgen;
pub mod spellseq;
pub mod svg;
pub mod trajectory;

use thiserror::Error;

/// Exit status for usage errors (bad flags, bad config values).
pub const EXIT_USAGE: i32 = 1;
/// Exit status for malformed or inconsistent input data.
pub const EXIT_DATA: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Ingest(#[from] ingest::IngestError),
    #[error(transparent)]
    Spell(#[from] spellseq::SpellError),
    #[error(transparent)]
    Cluster(#[from] clusterer::ClusterError),
    #[error(transparent)]
    Pattern(#[from] patterns::PatternError),
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
    #[error(transparent)]
    Lmm(#[from] mixedmodel::LmmError),
    #[error(transparent)]
    Gen(#[from] simgen::GenError),
    #[error(transparent)]
    Plot(#[from] svg::PlotError),
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        use mixedmodel::LmmError as L;
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Usage(_) => EXIT_USAGE,
            Error::Spell(spellseq::SpellError::InvalidCost(_)) => EXIT_USAGE,
            Error::Pattern(patterns::PatternError::UnknownAttribute(_)) => EXIT_USAGE,
            Error::Trajectory(trajectory::TrajectoryError::SlotWidth(_)) => EXIT_USAGE,
            Error::Gen(simgen::GenError::Config(_)) => EXIT_USAGE,
            Error::Plot(svg::PlotError::TopN { .. }) => EXIT_USAGE,
            Error::Lmm(L::Formula(_) | L::UnknownLevel { .. } | L::ContrastLength { .. }) => EXIT_USAGE,
            Error::Lmm(L::RankDeficient { .. } | L::ZeroVariance) => EXIT_NUMERICAL,
            Error::Gen(simgen::GenError::Overlap { .. }) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
