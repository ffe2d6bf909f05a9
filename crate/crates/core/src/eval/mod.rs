//! Evaluation metrics, desk-scale tasks and the throughput benchmark.

pub mod ari;
pub mod bench;
pub mod probe;
pub mod retrieval;
pub mod tasks;

pub use ari::ari;
pub use bench::{bench, linear_r2, BenchReport, BenchSettings};
pub use probe::{miou, paint_predictions, probe_loss_and_grad, train_probe, Confusion, PaintLayout, ProbeModel};
pub use retrieval::{average_precision, image_score, map_mrp, precision_at, retrieve, Ranked, RetrievalScores};
