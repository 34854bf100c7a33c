//! Per-sample output records written by the pipeline stages.

use empathic_core::corpus::TestSample;
use empathic_core::prompting::{render_dialogue, ReasonedOutput};
use serde::{Deserialize, Serialize};

use crate::scoring::ScoredPair;

/// Stable sample id: conversation id plus the index of the reference turn.
pub fn sample_id(sample: &TestSample) -> String {
    format!("{}#{}", sample.conversation_id, sample.reference.index)
}

/// One reasoning call: the prompt, the raw reply, and its parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRecord {
    pub sample_id: String,
    pub examples: Vec<String>,
    pub request_key: String,
    pub prompt: String,
    pub raw_reply: String,
    pub parsed: Option<ReasonedOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub sample_id: String,
    pub method: String,
    pub response: String,
    pub context: String,
    pub reference: String,
    pub emotion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoned: Option<ReasonedOutput>,
}

impl GenerationRecord {
    pub fn new(sample: &TestSample, method: &str, response: String, reasoned: Option<ReasonedOutput>) -> Self {
        Self {
            sample_id: sample_id(sample),
            method: method.to_string(),
            response,
            context: render_dialogue(&sample.context),
            reference: sample.reference.text.clone(),
            emotion: sample.emotion_label.clone(),
            reasoned,
        }
    }

    pub fn to_scored_pair(&self) -> ScoredPair {
        ScoredPair {
            sample_id: self.sample_id.clone(),
            generated: self.response.clone(),
            reference: self.reference.clone(),
            context: self.context.clone(),
            emotion: Some(self.emotion.clone()),
        }
    }
}
