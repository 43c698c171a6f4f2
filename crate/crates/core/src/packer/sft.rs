//! Instruction-tuning examples: question prompt followed by the structured
//! recall target, with loss restricted to the target.

use crate::corpus::{tokenize_fallback, Corpus, DocumentGroup};
use crate::evalharness::{render_generation, RecallGeneration, RecallTemplate, RecalledArticle};

use super::PackError;

/// Instruction placed before every question.
pub const PROMPT_PREAMBLE: &str = "Below is a question. Your task is to read the question, \
recall the necessary information, and provide a concise answer. Please ensure your answer is \
based only on the recalled information.";

/// Turns text into token IDs.
pub trait TextEncoder {
    fn encode(&self, text: &str) -> Vec<u32>;
}

impl<F: Fn(&str) -> Vec<u32>> TextEncoder for F {
    fn encode(&self, text: &str) -> Vec<u32> {
        self(text)
    }
}

/// The byte-level fallback tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEncoder;

impl TextEncoder for ByteEncoder {
    fn encode(&self, text: &str) -> Vec<u32> {
        tokenize_fallback(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub prompt_text: String,
    pub target_text: String,
    pub prompt_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
    /// Over `prompt_tokens ‖ target_tokens`; true exactly on the target.
    pub loss_mask: Vec<bool>,
}

impl SftExample {
    pub fn input_tokens(&self) -> Vec<u32> {
        [self.prompt_tokens.as_slice(), self.target_tokens.as_slice()].concat()
    }
}

pub(crate) fn render_prompt(question: &str) -> String {
    format!("{PROMPT_PREAMBLE}\n\n# Question:\n{question}\n")
}

/// Ground-truth recall generation for a group: every relevant article, in
/// `relevant_ids` order, then the answer.
pub fn ground_truth_generation(
    group: &DocumentGroup,
    corpus: &Corpus,
) -> Result<RecallGeneration, PackError> {
    if group.relevant_ids.is_empty() {
        return Err(PackError::NoRelevantDocuments(group.question_id.clone()));
    }
    let articles = group
        .relevant_ids
        .iter()
        .map(|id| {
            let doc = corpus
                .document(id)
                .ok_or_else(|| PackError::UnknownDocument(id.clone()))?;
            let content = doc
                .raw_text
                .clone()
                .ok_or_else(|| PackError::MissingRawText(id.clone()))?;
            Ok(RecalledArticle {
                title: doc.title.clone(),
                content,
            })
        })
        .collect::<Result<Vec<_>, PackError>>()?;
    Ok(RecallGeneration {
        articles,
        answer: group.answer.clone(),
    })
}

pub fn build_sft_example(
    group: &DocumentGroup,
    corpus: &Corpus,
    template: RecallTemplate,
    encoder: &dyn TextEncoder,
) -> Result<SftExample, PackError> {
    let generation = ground_truth_generation(group, corpus)?;
    let question = group
        .question
        .as_deref()
        .ok_or_else(|| PackError::MissingQuestion(group.question_id.clone()))?;
    let prompt_text = render_prompt(question);
    let target_text = render_generation(&generation, template);
    let prompt_tokens = encoder.encode(&prompt_text);
    let target_tokens = encoder.encode(&target_text);
    let loss_mask = std::iter::repeat_n(false, prompt_tokens.len())
        .chain(std::iter::repeat_n(true, target_tokens.len()))
        .collect();
    Ok(SftExample {
        prompt_text,
        target_text,
        prompt_tokens,
        target_tokens,
        loss_mask,
    })
}
