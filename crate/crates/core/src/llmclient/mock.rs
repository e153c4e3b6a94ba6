//! Deterministic stand-in generator.
//!
//! Rules, keyed on the prompt's task tag:
//! - `oe_qa_gen`: one "after" QA per adjacent caption pair of the narrative.
//! - `mcqa_gen`: one 4-option item per adjacent pair; distractors are the
//!   other captions, padded with fixed fillers.
//! - `dispreferred_gen` / `shuffled_option_select`: answer with the
//!   successor of the asked-about caption in the narrative as written,
//!   read cyclically (the last caption's successor is the first).
//! - hallucination prompts: a frame description prefixed with
//!   [`HALLUCINATION_MARKER`].
//! - `mut_describe`: a description naming the attached frames.

use serde_json::json;

use super::{Backend, BackendError, GenRequest, GenResponse, Usage};
use crate::digest::sha256_hex;
use crate::preprocess::parse_composite_caption;
use crate::promptkit::{narrative_block, task_tag, TemplateId, TemplateSet};

pub const HALLUCINATION_MARKER: &str = "HALLUCINATED:";
pub const AFTER_PREFIX: &str = "What happens immediately after: ";

const FILLERS: [&str; 3] = [
    "Nothing else happens in the video.",
    "The video ends without any further events.",
    "The opening scene repeats from the start.",
];

pub struct MockBackend;

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &GenRequest) -> Result<GenResponse, BackendError> {
        let text = mock_rules(&request.prompt, &request.attachments);
        Ok(GenResponse {
            usage: Usage {
                prompt_tokens: request.prompt.split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
            model_id: request.model_id.clone(),
            cached: false,
            latency_ms: 0,
        })
    }
}

pub fn after_question(caption: &str) -> String {
    format!("{AFTER_PREFIX}{caption}?")
}

/// The caption a mock "after" question asks about.
pub fn asked_caption(question: &str) -> Option<&str> {
    question.strip_prefix(AFTER_PREFIX)?.strip_suffix('?')
}

fn cyclic_successor<'a>(captions: &'a [String], caption: &str) -> Option<&'a str> {
    let pos = captions.iter().position(|c| c == caption)?;
    Some(captions[(pos + 1) % captions.len()].as_str())
}

fn option_order_key(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

/// Options for an "after caption i" item: the true successor plus up to
/// three other captions (nearest first), then fillers.
pub fn mcqa_options(captions: &[String], i: usize) -> (Vec<String>, usize) {
    let correct = captions[i + 1].clone();
    let mut others: Vec<(usize, &String)> = captions
        .iter()
        .enumerate()
        .filter(|&(j, c)| j != i && j != i + 1 && *c != correct && *c != captions[i])
        .collect();
    others.sort_by_key(|&(j, _)| (j.abs_diff(i + 1), j));
    let mut options = vec![correct.clone()];
    for (_, c) in others {
        if options.len() == 4 {
            break;
        }
        if !options.contains(c) {
            options.push(c.clone());
        }
    }
    for f in FILLERS {
        if options.len() == 4 {
            break;
        }
        options.push(f.to_string());
    }
    options.sort_by_key(|o| option_order_key(o));
    let answer = options
        .iter()
        .position(|o| *o == correct)
        .expect("correct option present");
    (options, answer)
}

fn option_lines(prompt: &str) -> Vec<String> {
    let Some(start) = prompt.find("Options:\n") else {
        return Vec::new();
    };
    prompt[start + "Options:\n".len()..]
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .filter_map(|l| l.get(3..).filter(|_| l.as_bytes().get(1) == Some(&b'.')))
        .map(str::to_string)
        .collect()
}

fn question_line(prompt: &str) -> Option<&str> {
    prompt.lines().find_map(|l| l.strip_prefix("Question: "))
}

fn describe_frames(attachments: &[String]) -> String {
    if attachments.is_empty() {
        return "The video shows a sequence of events from beginning to end.".into();
    }
    let names: Vec<String> = attachments
        .iter()
        .map(|a| {
            let p = std::path::Path::new(a);
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            match p.parent().and_then(|d| d.file_name()) {
                Some(d) => format!("{}/{stem}", d.to_string_lossy()),
                None => stem,
            }
        })
        .collect();
    format!(
        "The video moves through {} moments in order: {}.",
        names.len(),
        names.join(", ")
    )
}

fn is_hallucination_prompt(prompt: &str) -> bool {
    let set = TemplateSet::builtin();
    (1..=crate::promptkit::HALLUCINATION_PROMPTS as u8).any(|k| {
        let body = &set.get(TemplateId::Hallucination(k)).body;
        prompt.trim() == body.trim()
    })
}

pub fn mock_rules(prompt: &str, attachments: &[String]) -> String {
    let captions = narrative_block(prompt)
        .and_then(parse_composite_caption)
        .unwrap_or_default();
    match task_tag(prompt) {
        Some("oe_qa_gen") => {
            let items: Vec<_> = captions
                .windows(2)
                .map(|w| json!({"question": after_question(&w[0]), "answer": w[1], "relation": "after"}))
                .collect();
            json!({ "items": items }).to_string()
        }
        Some("mcqa_gen") => {
            let items: Vec<_> = (0..captions.len().saturating_sub(1))
                .map(|i| {
                    let (options, answer_index) = mcqa_options(&captions, i);
                    json!({"question": after_question(&captions[i]), "options": options, "answer_index": answer_index})
                })
                .collect();
            json!({ "items": items }).to_string()
        }
        Some("dispreferred_gen") => {
            let question = question_line(prompt).unwrap_or_default();
            let answer = asked_caption(question)
                .and_then(|c| cyclic_successor(&captions, c))
                .or(captions.first().map(String::as_str))
                .unwrap_or("Nothing happens.");
            json!({"items": [{"question": question, "answer": answer, "relation": "after"}]}).to_string()
        }
        Some("shuffled_option_select") => {
            let question = question_line(prompt).unwrap_or_default();
            let options = option_lines(prompt);
            let pick = asked_caption(question)
                .and_then(|c| cyclic_successor(&captions, c))
                .and_then(|succ| options.iter().position(|o| o == succ));
            match pick {
                Some(answer_index) => {
                    json!({"items": [{"question": question, "options": options, "answer_index": answer_index}]})
                        .to_string()
                }
                None => json!({"items": []}).to_string(),
            }
        }
        Some("mut_describe") => describe_frames(attachments),
        _ if is_hallucination_prompt(prompt) => {
            format!("{HALLUCINATION_MARKER} {}", describe_frames(attachments))
        }
        _ => "I cannot determine the answer.".into(),
    }
}
