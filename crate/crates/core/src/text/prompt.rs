use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled task example, one line of a task JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Entailment-style templates: label 0 entails, label 1 does not.
pub fn entailment_templates() -> Vec<String> {
    vec![
        "The first sentence entails with the second. The first sentence is {A} and the second is {B}".into(),
        "The first sentence doesn't entail with the second. The first sentence is {A} and the second is {B}".into(),
    ]
}

/// Rewrites a labeled sample as declarative text using its class template.
pub fn knowledge_prompt(sample: &TaskSample, templates: &[String]) -> Result<String> {
    let template = templates
        .get(sample.label)
        .ok_or_else(|| Error::Template(format!("no template for label {}", sample.label)))?;
    if !template.contains("{A}") {
        return Err(Error::Template(format!("template for label {} lacks {{A}}", sample.label)));
    }
    let mut out = template.replace("{A}", &sample.text_a);
    if out.contains("{B}") {
        let b = sample
            .text_b
            .as_deref()
            .ok_or_else(|| Error::Template("template uses {B} but the sample has no text_b".into()))?;
        out = out.replace("{B}", b);
    }
    Ok(out)
}

/// `A [SEP] B [SEP] label`, or `A [SEP] label` without a second text.
pub fn concat_sample(sample: &TaskSample) -> String {
    match &sample.text_b {
        Some(b) => format!("{} [SEP] {} [SEP] {}", sample.text_a, b, sample.label),
        None => format!("{} [SEP] {}", sample.text_a, sample.label),
    }
}

/// [`concat_sample`] behind a leading `[Tagged]` marker.
pub fn tag_sample(sample: &TaskSample) -> String {
    format!("[Tagged] {}", concat_sample(sample))
}

/// The model-input side of the tagged variant: the sample texts behind
/// `[Tagged]`, without the label.
pub fn tag_input(sample: &TaskSample) -> TaskSample {
    TaskSample {
        text_a: format!("[Tagged] {}", sample.text_a),
        text_b: sample.text_b.clone(),
        label: sample.label,
    }
}
