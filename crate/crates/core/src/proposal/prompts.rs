//! Prompt templates.
//!
//! Template files are plain text with optional `[system]` / `[user]` section
//! markers on their own lines. Placeholders are single-brace identifiers,
//! `{problem_statement}`; any other brace sequence is copied through.
//! Substituted values are never re-scanned, so payloads containing braces
//! are safe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gateway::{ChatMessage, Role};
use crate::trace::{Step, Trace, TraceError};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: no value for placeholder {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("task has no gold answer but the prompt requires one")]
    MissingGold,
    #[error(transparent)]
    Step(#[from] TraceError),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    name: String,
    system: Option<String>,
    user: String,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_lowercase() || c == '_'
}

fn is_ident(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Placeholder names referenced by `text`, in order of appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let bytes: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == '{' && i + 1 < bytes.len() && is_ident_start(bytes[i + 1]) {
            let mut j = i + 1;
            while j < bytes.len() && is_ident(bytes[j]) {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == '}' {
                out.push(bytes[i + 1..j].iter().collect());
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn fill(template: &str, name: &str, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let chars: Vec<char> = template.chars().collect();
    let mut out = String::with_capacity(template.len());
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '{' && i + 1 < chars.len() && is_ident_start(chars[i + 1]) {
            let mut j = i + 1;
            while j < chars.len() && is_ident(chars[j]) {
                j += 1;
            }
            if j < chars.len() && chars[j] == '}' {
                let key: String = chars[i + 1..j].iter().collect();
                match vars.get(key.as_str()) {
                    Some(v) => out.push_str(v),
                    None => {
                        return Err(PromptError::MissingValue {
                            template: name.to_string(),
                            name: key,
                        })
                    }
                }
                i = j + 1;
                continue;
            }
        }
        out.push(chars[i]);
        i += 1;
    }
    Ok(out)
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Self {
        let mut system: Option<String> = None;
        let mut user = String::new();
        let mut current: Option<Role> = None;
        let mut buf = String::new();
        let flush = |role: Option<Role>,
                     buf: &mut String,
                     system: &mut Option<String>,
                     user: &mut String| {
            let body = buf.trim_end_matches('\n').to_string();
            match role {
                Some(Role::System) => *system = Some(body),
                _ => {
                    if !body.trim().is_empty() || user.is_empty() {
                        *user = body
                    }
                }
            }
            buf.clear();
        };
        for line in text.lines() {
            match line.trim() {
                "[system]" => {
                    flush(current, &mut buf, &mut system, &mut user);
                    current = Some(Role::System);
                }
                "[user]" => {
                    flush(current, &mut buf, &mut system, &mut user);
                    current = Some(Role::User);
                }
                _ => {
                    buf.push_str(line);
                    buf.push('\n');
                }
            }
        }
        flush(current, &mut buf, &mut system, &mut user);
        Self {
            name: name.to_string(),
            system,
            user,
        }
    }

    pub fn load(name: &str, path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::parse(name, &text))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> Vec<String> {
        let mut all = self.system.as_deref().map(placeholders).unwrap_or_default();
        all.extend(placeholders(&self.user));
        all
    }

    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<Vec<ChatMessage>, PromptError> {
        let mut msgs = Vec::with_capacity(2);
        if let Some(sys) = &self.system {
            msgs.push(ChatMessage::new(Role::System, fill(sys, &self.name, vars)?));
        }
        msgs.push(ChatMessage::new(
            Role::User,
            fill(&self.user, &self.name, vars)?,
        ));
        Ok(msgs)
    }
}

/// Paths overriding the built-in templates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptPaths {
    pub intervention: Option<PathBuf>,
    pub attribution: Option<PathBuf>,
    pub grader: Option<PathBuf>,
    pub continuation: Option<PathBuf>,
    pub critic_b: Option<PathBuf>,
    pub critic_c: Option<PathBuf>,
    pub refine_generate: Option<PathBuf>,
    pub refine_feedback: Option<PathBuf>,
    pub refine_refine: Option<PathBuf>,
    pub reflect_initial: Option<PathBuf>,
    pub reflect_reflect: Option<PathBuf>,
    pub reflect_reanswer: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PromptSet {
    pub intervention: Template,
    pub attribution: Template,
    pub grader: Template,
    pub continuation: Template,
    pub critic_b: Template,
    pub critic_c: Template,
    pub refine_generate: Template,
    pub refine_feedback: Template,
    pub refine_refine: Template,
    pub reflect_initial: Template,
    pub reflect_reflect: Template,
    pub reflect_reanswer: Template,
}

macro_rules! builtin {
    ($name:literal) => {
        Template::parse(
            $name,
            include_str!(concat!("../../prompts/", $name, ".txt")),
        )
    };
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            intervention: builtin!("intervention"),
            attribution: builtin!("attribution"),
            grader: builtin!("grader"),
            continuation: builtin!("continuation"),
            critic_b: builtin!("critic_b"),
            critic_c: builtin!("critic_c"),
            refine_generate: builtin!("refine_generate"),
            refine_feedback: builtin!("refine_feedback"),
            refine_refine: builtin!("refine_refine"),
            reflect_initial: builtin!("reflect_initial"),
            reflect_reflect: builtin!("reflect_reflect"),
            reflect_reanswer: builtin!("reflect_reanswer"),
        }
    }
}

impl PromptSet {
    pub fn load(paths: &PromptPaths) -> Result<Self, PromptError> {
        let mut set = Self::default();
        let slots: [(&Option<PathBuf>, &mut Template, &str); 12] = [
            (&paths.intervention, &mut set.intervention, "intervention"),
            (&paths.attribution, &mut set.attribution, "attribution"),
            (&paths.grader, &mut set.grader, "grader"),
            (&paths.continuation, &mut set.continuation, "continuation"),
            (&paths.critic_b, &mut set.critic_b, "critic_b"),
            (&paths.critic_c, &mut set.critic_c, "critic_c"),
            (
                &paths.refine_generate,
                &mut set.refine_generate,
                "refine_generate",
            ),
            (
                &paths.refine_feedback,
                &mut set.refine_feedback,
                "refine_feedback",
            ),
            (
                &paths.refine_refine,
                &mut set.refine_refine,
                "refine_refine",
            ),
            (
                &paths.reflect_initial,
                &mut set.reflect_initial,
                "reflect_initial",
            ),
            (
                &paths.reflect_reflect,
                &mut set.reflect_reflect,
                "reflect_reflect",
            ),
            (
                &paths.reflect_reanswer,
                &mut set.reflect_reanswer,
                "reflect_reanswer",
            ),
        ];
        for (path, slot, name) in slots {
            if let Some(p) = path {
                *slot = Template::load(name, p)?;
            }
        }
        Ok(set)
    }
}

/// Whether the gold answer is shown to the proposer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    #[default]
    WithGold,
    NoGold,
}

pub const WITHHELD: &str = "WITHHELD";

fn render_step(step: &Step) -> String {
    format!("Step {} ({}): {}", step.id, step.step_type, step.payload)
}

/// Steps `0..index` rendered one per line, or `(none)`.
pub fn previous_step_context(t: &Trace, index: usize) -> String {
    if index == 0 {
        return "(none)".into();
    }
    t.steps[..index.min(t.steps.len())]
        .iter()
        .map(render_step)
        .collect::<Vec<_>>()
        .join("\n")
}

fn candidate_step(t: &Trace, index: usize) -> Result<&Step, PromptError> {
    if index + 1 >= t.steps.len() {
        return Err(TraceError::IndexOutOfRange {
            index,
            len: t.steps.len(),
        }
        .into());
    }
    Ok(&t.steps[index])
}

fn step_vars<'a>(t: &Trace, index: usize) -> Result<BTreeMap<&'a str, String>, PromptError> {
    let step = candidate_step(t, index)?;
    let mut vars = BTreeMap::new();
    vars.insert("problem_statement", t.task.problem_statement.clone());
    vars.insert("previous_step_context", previous_step_context(t, index));
    vars.insert("step_id", step.id.to_string());
    vars.insert("step_type", step.step_type.to_string());
    vars.insert("step_payload", step.payload.clone());
    Ok(vars)
}

pub fn render_intervention_messages(
    template: &Template,
    t: &Trace,
    index: usize,
    feedback: &str,
    variant: PromptVariant,
) -> Result<Vec<ChatMessage>, PromptError> {
    let mut vars = step_vars(t, index)?;
    let gold = match variant {
        PromptVariant::WithGold => t.task.gold_answer.clone().ok_or(PromptError::MissingGold)?,
        PromptVariant::NoGold => WITHHELD.to_string(),
    };
    vars.insert("gold_answer", gold);
    vars.insert(
        "final_answer",
        t.final_answer().unwrap_or("(no final answer)").to_string(),
    );
    vars.insert("execution_logs", feedback.to_string());
    template.render(&vars)
}

/// Fill the intervention template for step `index`.
pub fn render_intervention_prompt(
    template: &Template,
    t: &Trace,
    index: usize,
    feedback: &str,
    variant: PromptVariant,
) -> Result<String, PromptError> {
    Ok(join_messages(&render_intervention_messages(
        template, t, index, feedback, variant,
    )?))
}

pub fn render_attribution_messages(
    template: &Template,
    t: &Trace,
    index: usize,
    end_feedback: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    let mut vars = step_vars(t, index)?;
    vars.insert(
        "gold_answer",
        t.task.gold_answer.clone().ok_or(PromptError::MissingGold)?,
    );
    vars.insert("end_feedback", end_feedback.to_string());
    template.render(&vars)
}

/// Fill the causal-attribution template for step `index`.
pub fn render_attribution_prompt(
    template: &Template,
    t: &Trace,
    index: usize,
    end_feedback: &str,
) -> Result<String, PromptError> {
    Ok(join_messages(&render_attribution_messages(
        template,
        t,
        index,
        end_feedback,
    )?))
}

/// Flatten messages to a single text, system first.
pub fn join_messages(msgs: &[ChatMessage]) -> String {
    msgs.iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{StepType, TaskSpec, VerifierConfig, VerifierKind};

    fn trace() -> Trace {
        Trace {
            trace_id: "t".into(),
            task: TaskSpec {
                problem_statement: "Boxes hold 12 apples; 6 boxes. How many apples?".into(),
                gold_answer: Some("seventy-two".into()),
                verifier_kind: VerifierKind::Numeric,
                verifier_config: VerifierConfig::default(),
            },
            steps: vec![
                Step::new(0, StepType::Reasoning, "multiply boxes by apples"),
                Step::new(1, StepType::ToolCall, "calculator\n6 * 13"),
                Step::new(2, StepType::FinalAnswer, "78"),
            ],
        }
    }

    #[test]
    fn intervention_with_gold() {
        let p = render_intervention_prompt(
            &PromptSet::default().intervention,
            &trace(),
            1,
            "expected 72",
            PromptVariant::WithGold,
        )
        .unwrap();
        assert!(p.contains("Correct Answer (FOR REFERENCE ONLY): seventy-two"));
        assert!(p.contains("Step 0 (reasoning): multiply boxes by apples"));
        assert!(p.contains("Current step (Step 1, Type: tool_call):\ncalculator\n6 * 13"));
        assert!(p.contains("DO NOT directly use it"));
    }

    #[test]
    fn no_gold_withholds() {
        let p = render_intervention_prompt(
            &PromptSet::default().intervention,
            &trace(),
            1,
            "",
            PromptVariant::NoGold,
        )
        .unwrap();
        assert!(p.contains("WITHHELD"));
        assert!(!p.contains("seventy-two"));
    }

    #[test]
    fn first_step_has_no_context() {
        let p = render_intervention_prompt(
            &PromptSet::default().intervention,
            &trace(),
            0,
            "",
            PromptVariant::WithGold,
        )
        .unwrap();
        assert!(p.contains("Context from previous steps:\n(none)"));
    }

    #[test]
    fn gold_required_when_shown() {
        let mut t = trace();
        t.task.gold_answer = None;
        let set = PromptSet::default();
        assert!(matches!(
            render_intervention_prompt(&set.intervention, &t, 1, "", PromptVariant::WithGold),
            Err(PromptError::MissingGold)
        ));
        assert!(matches!(
            render_attribution_prompt(&set.attribution, &t, 1, ""),
            Err(PromptError::MissingGold)
        ));
    }

    #[test]
    fn attribution_prompt() {
        let p = render_attribution_prompt(&PromptSet::default().attribution, &trace(), 1, "got 78")
            .unwrap();
        assert!(p.contains("Environment feedback at the point of failure: got 78"));
        assert!(p.contains("Current step (Step 1, Type: tool_call)"));
    }

    #[test]
    fn final_step_rejected() {
        let set = PromptSet::default();
        assert!(render_attribution_prompt(&set.attribution, &trace(), 2, "").is_err());
    }

    #[test]
    fn braces_in_values_are_not_rescanned() {
        let tpl = Template::parse("x", "a {v} b {\"json\": 1}");
        let mut vars = BTreeMap::new();
        vars.insert("v", "{step_id}".to_string());
        let msgs = tpl.render(&vars).unwrap();
        assert_eq!(msgs[0].content, "a {step_id} b {\"json\": 1}");
    }

    #[test]
    fn missing_value_is_an_error() {
        let tpl = Template::parse("x", "hello {who}");
        let err = tpl.render(&BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("{who}"));
    }

    #[test]
    fn sections_split() {
        let tpl = Template::parse("x", "[system]\nsys {a}\n[user]\nusr {b}\n");
        assert_eq!(tpl.placeholders(), vec!["a", "b"]);
        let mut vars = BTreeMap::new();
        vars.insert("a", "1".to_string());
        vars.insert("b", "2".to_string());
        let msgs = tpl.render(&vars).unwrap();
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0].role, Role::System);
        assert_eq!(msgs[0].content, "sys 1");
        assert_eq!(msgs[1].content, "usr 2");
    }

    #[test]
    fn builtin_templates_have_expected_placeholders() {
        let set = PromptSet::default();
        let grader = set.grader.placeholders();
        for p in ["problem_statement", "gold_answer", "final_answer"] {
            assert!(grader.contains(&p.to_string()));
        }
        assert!(set
            .reflect_reflect
            .placeholders()
            .contains(&"wrong_solution".to_string()));
    }
}
