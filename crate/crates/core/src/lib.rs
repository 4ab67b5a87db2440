//! Mutual-supervision training-sample assignment for dense object detectors.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: boxes, IoU, GIoU loss with gradients, class-wise NMS.
//! * [`assignment`]: candidate bags, mutual criteria, rank-to-weight mapping.
//! * [`losses`]: three-part focal loss and weighted GIoU loss.
//! * [`detector`]: direct-parameterized toy detector, decoding and SGD training.
//! * [`scenes`]: seeded synthetic scenes and their JSON format.
//! * [`eval`]: inference, average precision and head-consistency metrics.
//!
//! The guide in `book/` walks through each stage; its code blocks are
//! compiled and run as doc-tests of this crate.

pub mod assignment;
pub mod detector;
mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod scenes;

pub use assignment::{
    build_candidate_bags, match_gt, musu_assign, mutual_criteria, rank_to_weights, AssignConfig,
    AssignmentOutput, CandidateBag, PredictionSnapshot,
};
pub use detector::{
    decode, init_detector, train_run, train_step, AnchorLayout, Checkpoint, DetectorParams,
    TrainConfig,
};
pub use error::{Error, Result};
pub use eval::{average_precision, consistency_metrics, evaluate, run_inference, EvalReport};
pub use geometry::{giou_loss, iou, nms, BBox, Detection, Object, Point};
pub use losses::{classification_loss, regression_loss, total_loss, FocalParams, LossBreakdown};
pub use scenes::{generate_scenes, Scene, SceneSet, SceneSetConfig};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub struct Geometry;
    #[doc = include_str!("../../../book/src/candidate-bags.md")]
    pub struct CandidateBags;
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub struct Ranking;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/detector.md")]
    pub struct Detector;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
