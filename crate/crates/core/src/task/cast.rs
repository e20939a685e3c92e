use serde::{Deserialize, Serialize};

use crate::backend::vocab::{TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::prompt::inject::{inject, InputBuilder, MaskedInput};
use crate::prompt::layout::TemplateLayout;
use crate::task::verbalizer::Verbalizer;
use crate::task::TaskKind;

/// A pair example: code/code for clone detection, query/code for search,
/// code/name for method-name prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub id: String,
    pub task: TaskKind,
    pub language: String,
    pub x1: TokenSequence,
    pub x2: TokenSequence,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerativeExample {
    pub id: String,
    pub task: TaskKind,
    pub language: String,
    pub source: TokenSequence,
    pub target: TokenSequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CastExample {
    pub input: MaskedInput,
    pub target: TokenId,
    pub truncated: bool,
}

/// Lengths to keep from each segment so both fit in `budget`, trimming the
/// two in proportion to their original lengths.
fn proportional_keep(a: usize, b: usize, budget: usize) -> (usize, usize) {
    if a + b <= budget {
        return (a, b);
    }
    let keep_a = (budget * a) / (a + b);
    let keep_b = (budget - keep_a).min(b);
    (keep_a, keep_b)
}

pub fn cast_classification(
    ex: &ClassificationExample,
    layout: &TemplateLayout,
    vocab: &Vocabulary,
    verbalizer: &Verbalizer,
    max_len: usize,
) -> Result<CastExample> {
    if !ex.task.is_classification() {
        return Err(Error::Unsupported(format!(
            "task {} is generative, not a pair classification",
            ex.task
        )));
    }
    if ex.label > 1 {
        return Err(Error::Data(format!("example {} has non-binary label {}", ex.id, ex.label)));
    }
    let fixed = layout.m + 2;
    if fixed > max_len {
        return Err(Error::InputTooLong {
            len: fixed,
            limit: max_len,
        });
    }
    let (k1, k2) = proportional_keep(ex.x1.len(), ex.x2.len(), max_len - fixed);
    let truncated = k1 < ex.x1.len() || k2 < ex.x2.len();
    let input = inject(&ex.x1[..k1], Some(&ex.x2[..k2]), layout, vocab, max_len)?;
    Ok(CastExample {
        input,
        target: verbalizer.target_for(ex.label)?,
        truncated,
    })
}

/// `[CLS] P_1..P_m <lang> source` for code generation; summarization omits
/// the language tag.
pub fn build_generative_input(
    source: &[TokenId],
    task: TaskKind,
    language: &str,
    m: usize,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<MaskedInput> {
    let mut b = InputBuilder::default();
    b.token(vocab.special().cls).prompts(m);
    match task {
        TaskKind::Cg => {
            b.token(vocab.language_id(language)?);
        }
        TaskKind::Cm => {}
        other => {
            return Err(Error::Unsupported(format!(
                "task {other} is a pair classification, not generation"
            )))
        }
    }
    b.segment(source);
    b.finish(max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::inject::Slot;
    use crate::prompt::layout::{build_layout, PromptPosition};

    fn vocab() -> Vocabulary {
        let langs = vec!["go".to_string(), "solidity".to_string()];
        Vocabulary::build(["a b c d e f g h"], &langs, &["yes", "no"], 100).unwrap()
    }

    fn example(label: u8) -> ClassificationExample {
        ClassificationExample {
            id: "e".into(),
            task: TaskKind::Cd,
            language: "go".into(),
            x1: vec![12, 13, 14],
            x2: vec![15, 16],
            label,
        }
    }

    #[test]
    fn labels_map_to_candidate_words() {
        let v = vocab();
        let verb = Verbalizer::yes_no(&v).unwrap();
        let layout = build_layout(PromptPosition::Uniform, 10, true).unwrap();
        let pos = cast_classification(&example(1), &layout, &v, &verb, 64).unwrap();
        assert_eq!(pos.target, v.id("yes").unwrap());
        let mut mnp = example(0);
        mnp.task = TaskKind::Mnp;
        let neg = cast_classification(&mnp, &layout, &v, &verb, 64).unwrap();
        assert_eq!(neg.target, v.id("no").unwrap());
        assert_eq!(pos.input, neg.input);
        assert!(!pos.truncated);
    }

    #[test]
    fn zero_prompts_is_the_bare_template() {
        let v = vocab();
        let verb = Verbalizer::yes_no(&v).unwrap();
        let layout = build_layout(PromptPosition::Uniform, 0, true).unwrap();
        let c = cast_classification(&example(1), &layout, &v, &verb, 64).unwrap();
        let sp = v.special();
        let expected: Vec<Slot> = [sp.cls, 12, 13, 14, 15, 16, sp.mask]
            .into_iter()
            .map(Slot::Token)
            .collect();
        assert_eq!(c.input.slots, expected);
    }

    #[test]
    fn overflow_truncates_proportionally() {
        let v = vocab();
        let verb = Verbalizer::yes_no(&v).unwrap();
        let layout = build_layout(PromptPosition::Uniform, 4, true).unwrap();
        let mut ex = example(1);
        ex.x1 = (0..30).map(|i| 10 + (i % 8)).collect();
        ex.x2 = (0..10).map(|i| 10 + (i % 8)).collect();
        let c = cast_classification(&ex, &layout, &v, &verb, 26).unwrap();
        assert!(c.truncated);
        assert_eq!(c.input.len(), 26);
        assert_eq!(c.input.segment(0), ex.x1[..15].to_vec());
        assert_eq!(c.input.segment(1), ex.x2[..5].to_vec());
    }

    #[test]
    fn generative_layout() {
        let v = vocab();
        let src: Vec<TokenId> = (0..20).map(|i| 10 + (i % 8)).collect();
        let cg = build_generative_input(&src, TaskKind::Cg, "go", 10, &v, 512).unwrap();
        assert_eq!(cg.len(), 32);
        assert_eq!(cg.mask_index, None);
        let cm = build_generative_input(&src, TaskKind::Cm, "go", 0, &v, 512).unwrap();
        let mut expected = vec![Slot::Token(v.special().cls)];
        expected.extend(src.iter().map(|&t| Slot::Token(t)));
        assert_eq!(cm.slots, expected);
        let sol = build_generative_input(&src, TaskKind::Cg, "solidity", 10, &v, 512).unwrap();
        let differing = cg.slots.iter().zip(&sol.slots).filter(|(a, b)| a != b).count();
        assert_eq!(differing, 1);
        assert!(matches!(
            build_generative_input(&src, TaskKind::Cg, "cobol", 10, &v, 512),
            Err(Error::Config(_))
        ));
    }
}
