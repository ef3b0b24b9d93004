//! Test-time-augmentation quality estimation and label-efficient training
//! building blocks for binary volumetric segmentation.
//!
//! * [`volume`], [`metrics`], [`svol`]: grids, Dice / Hausdorff95 / 2D ASSD, file format.
//! * [`tta`], [`qe`]: augmentation ensembles and estimated-Dice quality reports.
//! * [`curate`]: active selection, pseudo-label filtering, border correction, train sets.
//! * [`toyseg`]: a small trainable segmenter with a warm-restart schedule.
//! * [`synth`]: phantoms, domain shift and a simulated annotator.

pub mod curate;
mod edt;
pub mod error;
pub mod metrics;
pub mod qe;
pub mod segmenter;
pub mod stats;
pub mod svol;
pub mod synth;
pub mod toyseg;
pub mod tta;
pub mod volume;

pub use edt::{squared_edt_2d, squared_edt_3d};
pub use error::{Error, Result};
pub use metrics::{assd2d, dice, hausdorff95, MetricResult};
pub use qe::{median_vote, Aggregator, QualityReport, SoftMedian};
pub use segmenter::Segmenter;
pub use tta::{tta_infer, TtaEnsemble, TtaTransform};
pub use volume::{Geometry, Grid, Mask, ProbMap, Volume};
