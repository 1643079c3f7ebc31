//! OOD scene generation and OOD scoring for LiDAR 3D object detection.
//!
//! The crate covers two halves of the workflow. The first inserts
//! out-of-distribution objects into point-cloud frames under overlap, field
//! of view and detectability constraints ([`inject`]), with tooling to mine
//! unusual vehicles from labels ([`mine`]). The second turns detector outputs
//! into per-detection feature vectors ([`featx`]), fits OOD scorers on
//! in-distribution data ([`scorers`], [`flow`]) and evaluates them
//! ([`metrics`]). [`pipeline`] ties the stages into reproducible runs.

pub mod detector;
pub mod featx;
pub mod flow;
pub mod geometry;
pub mod inject;
pub mod metrics;
pub mod mine;
pub mod pcio;
pub mod pipeline;
pub mod scorers;
pub mod seed;
pub mod synth;

/// Any error the toolkit reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] pcio::PcioError),
    #[error(transparent)]
    Detector(#[from] detector::DetectorError),
    #[error(transparent)]
    Inject(#[from] inject::InjectError),
    #[error(transparent)]
    Mine(#[from] mine::MineError),
    #[error(transparent)]
    Features(#[from] featx::FeatError),
    #[error(transparent)]
    Flow(#[from] flow::FlowError),
    #[error(transparent)]
    Score(#[from] scorers::ScoreError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("invalid spec: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, Error>;
