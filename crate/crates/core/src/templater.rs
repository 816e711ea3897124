//! Instruction templates for the captioner.
//!
//! Three shapes are produced, all starting with the base question:
//!
//! - bucket:    `What does the image describe? The {label} caption is`
//! - retrieval: `What does the image describe? {knowledge}, the caption is`
//! - combined:  `What does the image describe? {knowledge}, the {label} caption is`
//!
//! `knowledge` is the retrieved captions joined by `"; "`, cut back to the
//! longest run of whole captions that fits in `max_chars` characters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE_QUESTION: &str = "What does the image describe?";
pub const KNOWLEDGE_SEPARATOR: &str = "; ";
pub const DEFAULT_MAX_KNOWLEDGE_CHARS: usize = 200;

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() {
        return Err(Error::InvalidParameter(
            "bucket label must be nonempty".into(),
        ));
    }
    Ok(())
}

/// Joins captions with `"; "`, keeping the longest prefix of whole captions
/// whose joined length is at most `max_chars` characters. Empty captions
/// are skipped.
pub fn build_knowledge<S: AsRef<str>>(captions: &[S], max_chars: usize) -> String {
    let mut knowledge = String::new();
    let mut chars = 0;
    for caption in captions.iter().map(AsRef::as_ref).filter(|c| !c.is_empty()) {
        let extra = caption.chars().count()
            + if knowledge.is_empty() {
                0
            } else {
                KNOWLEDGE_SEPARATOR.len()
            };
        if chars + extra > max_chars {
            break;
        }
        if !knowledge.is_empty() {
            knowledge.push_str(KNOWLEDGE_SEPARATOR);
        }
        knowledge.push_str(caption);
        chars += extra;
    }
    knowledge
}

pub fn render_bucket(label: &str) -> Result<String> {
    check_label(label)?;
    Ok(format!("{BASE_QUESTION} The {label} caption is"))
}

pub fn render_retrieval<S: AsRef<str>>(captions: &[S], max_chars: usize) -> String {
    let knowledge = build_knowledge(captions, max_chars);
    if knowledge.is_empty() {
        format!("{BASE_QUESTION} The caption is")
    } else {
        format!("{BASE_QUESTION} {knowledge}, the caption is")
    }
}

pub fn render_combined<S: AsRef<str>>(
    label: &str,
    captions: &[S],
    max_chars: usize,
) -> Result<String> {
    check_label(label)?;
    let knowledge = build_knowledge(captions, max_chars);
    if knowledge.is_empty() {
        render_bucket(label)
    } else {
        Ok(format!(
            "{BASE_QUESTION} {knowledge}, the {label} caption is"
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Bucket,
    Retrieval,
    Combined,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bucket" => Ok(PromptMode::Bucket),
            "retrieval" => Ok(PromptMode::Retrieval),
            "combined" => Ok(PromptMode::Combined),
            other => Err(Error::InvalidParameter(format!(
                "unknown prompt mode {other:?}"
            ))),
        }
    }
}

/// A prompt before rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub bucket_label: Option<String>,
    pub knowledge: Vec<String>,
    pub max_knowledge_chars: usize,
}

impl PromptTemplate {
    pub fn new(bucket_label: Option<String>, knowledge: Vec<String>) -> Self {
        Self {
            bucket_label,
            knowledge,
            max_knowledge_chars: DEFAULT_MAX_KNOWLEDGE_CHARS,
        }
    }

    pub fn render(&self, mode: PromptMode) -> Result<String> {
        let label = || {
            self.bucket_label
                .as_deref()
                .ok_or_else(|| Error::Missing(format!("{mode:?} prompt needs a bucket label")))
        };
        match mode {
            PromptMode::Bucket => render_bucket(label()?),
            PromptMode::Retrieval => {
                Ok(render_retrieval(&self.knowledge, self.max_knowledge_chars))
            }
            PromptMode::Combined => {
                render_combined(label()?, &self.knowledge, self.max_knowledge_chars)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_templates() {
        assert_eq!(
            render_bucket("best match").unwrap(),
            "What does the image describe? The best match caption is"
        );
        assert_eq!(
            render_bucket("noise").unwrap(),
            "What does the image describe? The noise caption is"
        );
        assert!(render_bucket("").is_err());
    }

    #[test]
    fn retrieval_templates() {
        assert_eq!(
            render_retrieval(&["a red car on a road"], 200),
            "What does the image describe? a red car on a road, the caption is"
        );
        assert_eq!(build_knowledge(&["a", "b"], 100), "a; b");
        assert_eq!(
            render_retrieval::<&str>(&[], 200),
            "What does the image describe? The caption is"
        );
    }

    #[test]
    fn truncation_keeps_whole_captions() {
        assert_eq!(build_knowledge(&["abc", "def", "ghi"], 8), "abc; def");
        assert_eq!(build_knowledge(&["abc", "def", "ghi"], 7), "abc");
        assert_eq!(build_knowledge(&["abcdefghij", "a"], 5), "");
        assert_eq!(build_knowledge(&["", "ab"], 5), "ab");
        // Length is counted in characters, not bytes.
        assert_eq!(build_knowledge(&["été", "à"], 6), "été; à");
    }

    #[test]
    fn combined_templates() {
        let oracle = format!(
            "{BASE_QUESTION} {}, the {} caption is",
            "a cat", "best match"
        );
        assert_eq!(
            render_combined("best match", &["a cat"], 200).unwrap(),
            oracle
        );
        assert_eq!(
            render_combined::<&str>("noise", &[], 200).unwrap(),
            render_bucket("noise").unwrap()
        );
        let long = "x".repeat(300);
        assert_eq!(
            render_combined("best match", &[long], 200).unwrap(),
            render_bucket("best match").unwrap()
        );
        assert!(render_combined("", &["a"], 10).is_err());
    }

    #[test]
    fn template_struct_modes() {
        let t = PromptTemplate::new(Some("high quality".into()), vec!["a dog".into()]);
        assert_eq!(
            t.render(PromptMode::Combined).unwrap(),
            "What does the image describe? a dog, the high quality caption is"
        );
        let no_label = PromptTemplate::new(None, vec!["a dog".into()]);
        assert!(no_label.render(PromptMode::Bucket).is_err());
        assert_eq!(
            "retrieval".parse::<PromptMode>().unwrap(),
            PromptMode::Retrieval
        );
    }
}
