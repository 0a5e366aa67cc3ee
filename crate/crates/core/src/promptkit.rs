//! The four-prompt protocol: for each statement, support and refute prompts,
//! each with and without context, plus the instruction-following check used
//! to build the dump's `instruction_ok` mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actdump::TruthSide;

pub const SLOT_STATEMENT: &str = "[Statement]";
pub const SLOT_CHOICE: &str = "[Choice]";
pub const SLOT_SELECTED: &str = "[Selected Choice]";
pub const SLOT_CONTEXT: &str = "[Context]";

/// Default prompt template. Lines containing `[Context]` are dropped from the
/// no-context prompts. The completion is expected to open with `)`.
pub const DEFAULT_TEMPLATE: &str = "\
Context: [Context]
Statement: [Statement]
Choices: [Choice]
Write a completion that argues for the selected choice. Start with the selected choice, then give your reasoning.
Selected Choice: [Selected Choice]
Completion: (";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template is missing the {0} slot")]
    MissingSlot(&'static str),
    #[error("ground truth {truth:?} is not one of the choices {choices:?}")]
    UnknownGroundTruth { truth: String, choices: [String; 2] },
    #[error("malformed input line {line}: {message}")]
    Input { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Support,
    Refute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub stance: Stance,
    pub with_context: bool,
    pub text: String,
    /// Order in which the two choices were listed in the prompt.
    pub choice_order: [String; 2],
    pub selected_choice: String,
    /// Filled when the ground truth is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_side: Option<TruthSide>,
}

/// Prompts in fixed order: (support, no ctx), (refute, no ctx),
/// (support, ctx), (refute, ctx).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptQuad {
    pub statement_id: String,
    pub prompts: [Prompt; 4],
}

/// One row of the statements JSONL input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementRecord {
    pub statement_id: String,
    pub statement: String,
    /// `[affirm, deny]`
    pub choices: [String; 2],
    pub ground_truth: String,
    #[serde(default)]
    pub context: Option<String>,
}

/// Checks that the template carries the required slots.
pub fn validate_template(template: &str) -> Result<()> {
    for slot in [SLOT_STATEMENT, SLOT_CHOICE, SLOT_SELECTED] {
        if !template.contains(slot) {
            return Err(PromptError::MissingSlot(slot));
        }
    }
    Ok(())
}

fn render(template: &str, statement: &str, order: &[String; 2], selected: &str, context: Option<&str>) -> String {
    let lines: Vec<String> = template
        .lines()
        .filter(|line| context.is_some() || !line.contains(SLOT_CONTEXT))
        .map(|line| {
            let line = line
                .replace(SLOT_STATEMENT, statement)
                .replace(SLOT_CHOICE, &format!("{} / {}", order[0], order[1]))
                .replace(SLOT_SELECTED, selected);
            match context {
                Some(ctx) => line.replace(SLOT_CONTEXT, ctx),
                None => line,
            }
        })
        .collect();
    lines.join("\n")
}

/// Instantiate the four prompts for one statement. Choice listing order is
/// drawn independently for every prompt from `seed`. Without a context, the
/// two context prompts are rendered with an empty context string.
pub fn build_quad(
    statement_id: &str,
    statement: &str,
    choices: (&str, &str),
    context: Option<&str>,
    template: &str,
    seed: u64,
) -> Result<PromptQuad> {
    validate_template(template)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (affirm, deny) = (choices.0.to_string(), choices.1.to_string());
    let mut make = |stance: Stance, with_context: bool| {
        let order = if rng.random_bool(0.5) {
            [affirm.clone(), deny.clone()]
        } else {
            [deny.clone(), affirm.clone()]
        };
        let selected = match stance {
            Stance::Support => affirm.clone(),
            Stance::Refute => deny.clone(),
        };
        let ctx = with_context.then(|| context.unwrap_or(""));
        Prompt {
            stance,
            with_context,
            text: render(template, statement, &order, &selected, ctx),
            choice_order: order,
            selected_choice: selected,
            truth_side: None,
        }
    };
    let prompts = [
        make(Stance::Support, false),
        make(Stance::Refute, false),
        make(Stance::Support, true),
        make(Stance::Refute, true),
    ];
    Ok(PromptQuad { statement_id: statement_id.to_string(), prompts })
}

/// Build the quad for a statement record and label each prompt's truth side.
pub fn build_quad_for(record: &StatementRecord, template: &str, seed: u64) -> Result<PromptQuad> {
    let mut quad = build_quad(
        &record.statement_id,
        &record.statement,
        (&record.choices[0], &record.choices[1]),
        record.context.as_deref(),
        template,
        seed,
    )?;
    for p in &mut quad.prompts {
        p.truth_side = Some(label_truth(&p.selected_choice, &record.ground_truth, &record.choices)?);
    }
    Ok(quad)
}

/// True iff the completion, after leading whitespace, opens with `)` and the
/// next non-space text is `selected_choice` (case-sensitive) followed by a
/// word boundary.
pub fn check_instruction(completion: &str, selected_choice: &str) -> bool {
    let Some(rest) = completion.trim_start().strip_prefix(')') else {
        return false;
    };
    let Some(after) = rest.trim_start().strip_prefix(selected_choice) else {
        return false;
    };
    !selected_choice.is_empty() && after.chars().next().is_none_or(|c| !c.is_alphanumeric())
}

/// Map a selected choice to a truth side via the ground-truth label.
pub fn label_truth(selected_choice: &str, ground_truth: &str, choices: &[String; 2]) -> Result<TruthSide> {
    if !choices.iter().any(|c| c == ground_truth) {
        return Err(PromptError::UnknownGroundTruth {
            truth: ground_truth.to_string(),
            choices: choices.clone(),
        });
    }
    Ok(if selected_choice == ground_truth { TruthSide::True } else { TruthSide::False })
}

/// A statement is usable iff all four base prompts followed instructions.
pub fn quad_passes(quad: &PromptQuad, completions: &[&str; 4]) -> bool {
    quad.prompts
        .iter()
        .zip(completions)
        .all(|(p, c)| check_instruction(c, &p.selected_choice))
}

/// Parse statements JSONL, one record per non-blank line.
pub fn parse_statements(jsonl: &str) -> Result<Vec<StatementRecord>> {
    jsonl
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PromptError::Input { line: i + 1, message: e.to_string() })
        })
        .collect()
}
