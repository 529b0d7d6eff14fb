//! Unsupervised error detection for knowledge graphs.
//!
//! Triples are augmented into two neighborhood views, encoded with a
//! bi-LSTM and gated attention, trained with a translation loss plus a
//! cross-view contrastive loss, and ranked by a confidence score that
//! combines view agreement with translation energy.

pub mod baseline;
pub mod corrupt;
pub mod detect;
pub mod diff;
pub mod eagnn;
pub mod error;
pub mod experiment;
pub mod kg;
pub mod objective;
pub mod synth;
pub mod views;

pub use corrupt::{corruption_report, inject_errors, CorruptionMode, CorruptionReport, InjectionStats};
pub use eagnn::{AttentionKind, Hyper, LocalEncoder, ModelState, ViewEncoding};
pub use error::{Error, Result};
pub use kg::{graph_stats, load_graph, load_labels, parse_graph, write_graph, write_labels, KnowledgeGraph, StatsReport, Triple};
pub use views::{build_views, neighbor_budget, EntityIndex, TripleViewGraph};
pub use baseline::{baseline_score, train_baseline, BaselineConfig, BaselineMethod, BaselineModel};
pub use detect::{
    metrics_table, precision_recall_at_k, score_all, score_components, ConfidenceRanking, MetricsRow, RankEntry,
    ScoreComponents, DEFAULT_K_GRID,
};
pub use experiment::{derive_seed, fit, fit_model, split_seed, Fit, SweepParam, Variant};
pub use objective::{energy, train, NegativeMode, TrainConfig, TrainLog};
pub use synth::{generate, SynthConfig};
