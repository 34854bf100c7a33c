//! Automatic evaluation measures.
//!
//! Scores that need a model (BERTScore embeddings, emotion and empathy
//! raters) take their model outputs as arguments; fetching those belongs to
//! the caller.

mod bertscore;
mod bleu;
mod distinct;
mod f1;
mod raters;
mod report;

pub use bertscore::{bert_score, BertScore};
pub use bleu::{bleu_from_stats, bleu_n, sentence_stats, BleuStats};
pub use distinct::{distinct_contributions, distinct_n, ngrams};
pub use f1::{overlap_f1, F1Score, StopwordList};
pub use raters::{emotion_accuracy, epitome_means, EpitomeMeans, EpitomeRating};
pub use report::{config_digest, Aggregation, MetricReport, SampleScore};
