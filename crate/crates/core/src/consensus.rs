//! Two-critic validation of a causal attribution.
//!
//! Critic B judges the attribution, critic C judges both the attribution and
//! B's critique. The score averages the step's crs with each critic's
//! confidence-weighted agreement: `(crs + c_B·a_B + c_C·a_C) / 3`.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposal::gateway::{ChatGateway, ChatRequest, GatewayError};
use crate::proposal::prompts::{render_attribution_prompt, PromptError, Template};
use crate::trace::Trace;

pub const DEFAULT_TAU_C: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Agent {
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Agree,
    Partial,
    Disagree,
}

impl std::str::FromStr for Label {
    type Err = ConsensusError;
    fn from_str(s: &str) -> Result<Self, ConsensusError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AGREE" => Ok(Label::Agree),
            "PARTIAL" => Ok(Label::Partial),
            "DISAGREE" => Ok(Label::Disagree),
            _ => Err(ConsensusError::UnknownLabel(s.to_string())),
        }
    }
}

/// AGREE → 1, PARTIAL → 0.5, DISAGREE → 0.
pub fn agreement_weight(label: Label) -> f64 {
    match label {
        Label::Agree => 1.0,
        Label::Partial => 0.5,
        Label::Disagree => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critique {
    pub agent: Agent,
    pub label: Label,
    pub confidence: f64,
    pub rationale: String,
    /// The reply could not be parsed and the neutral fallback was used.
    #[serde(default)]
    pub parse_warning: bool,
}

impl Critique {
    pub fn new(agent: Agent, label: Label, confidence: f64) -> Self {
        Self {
            agent,
            label,
            confidence: clamp_unit(confidence),
            rationale: String::new(),
            parse_warning: false,
        }
    }
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("unknown agreement label {0:?}")]
    UnknownLabel(String),
    #[error("consensus needs one critique from each of B and C")]
    Critics,
    #[error("crs must be 0 or 1, got {0}")]
    Crs(u8),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// `(crs + Σ c_j·a_j) / 3` over exactly one B and one C critique.
pub fn consensus_score(crs: u8, critiques: &[Critique]) -> Result<f64, ConsensusError> {
    if crs > 1 {
        return Err(ConsensusError::Crs(crs));
    }
    let b = critiques.iter().filter(|c| c.agent == Agent::B).count();
    let c = critiques.iter().filter(|c| c.agent == Agent::C).count();
    if critiques.len() != 2 || b != 1 || c != 1 {
        return Err(ConsensusError::Critics);
    }
    let weighted: f64 = critiques
        .iter()
        .map(|c| clamp_unit(c.confidence) * agreement_weight(c.label))
        .sum();
    Ok((f64::from(crs) + weighted) / 3.0)
}

pub fn retained(score: f64, tau_c: f64) -> bool {
    score >= tau_c
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\W*LABEL\W*:\s*\**\s*(AGREE|PARTIAL|DISAGREE)\b").unwrap())
}

fn confidence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?im)^\W*CONFIDENCE\W*:\s*\**\s*(-?\d+(?:\.\d+)?|-?\.\d+)").unwrap()
    })
}

/// Parse `LABEL:` and `CONFIDENCE:` header lines; anything missing falls
/// back to (PARTIAL, 0.5) with the warning flag set.
pub fn parse_critique(agent: Agent, reply: &str) -> Critique {
    let label = label_re()
        .captures(reply)
        .and_then(|c| c[1].parse::<Label>().ok());
    let confidence = confidence_re()
        .captures(reply)
        .and_then(|c| c[1].parse::<f64>().ok());
    match (label, confidence) {
        (Some(label), Some(conf)) => Critique {
            agent,
            label,
            confidence: clamp_unit(conf),
            rationale: reply.trim().to_string(),
            parse_warning: false,
        },
        _ => {
            log::warn!("unparseable critique from agent {agent:?}; using PARTIAL/0.5");
            Critique {
                agent,
                label: Label::Partial,
                confidence: 0.5,
                rationale: reply.trim().to_string(),
                parse_warning: true,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub retained: bool,
    pub score: f64,
    pub critiques: Vec<Critique>,
}

pub struct CriticTemplates<'a> {
    pub attribution: &'a Template,
    pub critic_b: &'a Template,
    pub critic_c: &'a Template,
}

/// Ask critics B then C about step `step_index` and gate on `tau_c`.
#[allow(clippy::too_many_arguments)]
pub fn validate_attribution(
    t: &Trace,
    step_index: usize,
    crs: u8,
    repair_payload: &str,
    end_feedback: &str,
    gateway: &dyn ChatGateway,
    templates: &CriticTemplates<'_>,
    tau_c: f64,
    temperature: f64,
) -> Result<ConsensusOutcome, ConsensusError> {
    let attribution =
        render_attribution_prompt(templates.attribution, t, step_index, end_feedback)?;
    let mut vars = BTreeMap::new();
    vars.insert("attribution_prompt", attribution);
    vars.insert("step_id", step_index.to_string());
    vars.insert("repair_payload", repair_payload.to_string());
    let b_msgs = templates.critic_b.render(&vars)?;
    let b_reply = gateway.complete(&ChatRequest::new(b_msgs, temperature, 0))?;
    let b = parse_critique(Agent::B, &b_reply);
    vars.insert("critique_b", b_reply);
    let c_msgs = templates.critic_c.render(&vars)?;
    let c_reply = gateway.complete(&ChatRequest::new(c_msgs, temperature, 0))?;
    let c = parse_critique(Agent::C, &c_reply);
    let critiques = vec![b, c];
    let score = consensus_score(crs, &critiques)?;
    Ok(ConsensusOutcome {
        retained: retained(score, tau_c),
        score,
        critiques,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::gateway::ScriptedGateway;
    use crate::proposal::prompts::PromptSet;
    use crate::trace::{Step, StepType, TaskSpec, VerifierConfig, VerifierKind};

    fn pair(b: (Label, f64), c: (Label, f64)) -> Vec<Critique> {
        vec![
            Critique::new(Agent::B, b.0, b.1),
            Critique::new(Agent::C, c.0, c.1),
        ]
    }

    #[test]
    fn weights() {
        assert_eq!(agreement_weight(Label::Agree), 1.0);
        assert_eq!(agreement_weight(Label::Partial), 0.5);
        assert_eq!(agreement_weight(Label::Disagree), 0.0);
        assert!("maybe".parse::<Label>().is_err());
    }

    #[test]
    fn score_examples() {
        let s = consensus_score(1, &pair((Label::Agree, 1.0), (Label::Agree, 1.0))).unwrap();
        assert_eq!(s, 1.0);
        let s = consensus_score(1, &pair((Label::Partial, 0.8), (Label::Disagree, 0.6))).unwrap();
        assert!((s - 1.4 / 3.0).abs() < 1e-12);
        let s = consensus_score(0, &pair((Label::Agree, 0.9), (Label::Agree, 0.9))).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
    }

    #[test]
    fn critic_set_is_checked() {
        let two_b = vec![Critique::new(Agent::B, Label::Agree, 1.0); 2];
        assert!(matches!(
            consensus_score(1, &two_b),
            Err(ConsensusError::Critics)
        ));
        assert!(matches!(
            consensus_score(1, &two_b[..1]),
            Err(ConsensusError::Critics)
        ));
        assert!(consensus_score(2, &pair((Label::Agree, 1.0), (Label::Agree, 1.0))).is_err());
    }

    #[test]
    fn confidence_is_clamped() {
        let c = parse_critique(Agent::B, "LABEL: AGREE\nCONFIDENCE: 1.7\nsure");
        assert_eq!(c.confidence, 1.0);
        assert!(!c.parse_warning);
        let c = parse_critique(Agent::B, "LABEL: disagree\nCONFIDENCE: -2");
        assert_eq!((c.label, c.confidence), (Label::Disagree, 0.0));
    }

    #[test]
    fn unparseable_falls_back() {
        let c = parse_critique(Agent::B, "I think so?");
        assert_eq!(
            (c.label, c.confidence, c.parse_warning),
            (Label::Partial, 0.5, true)
        );
        let c = parse_critique(Agent::C, "LABEL: AGREE\nno confidence given");
        assert!(c.parse_warning);
    }

    #[test]
    fn boundary_is_retained() {
        // (1 + 0.5·1 + 0) / 3 = 0.5
        let s = consensus_score(1, &pair((Label::Partial, 1.0), (Label::Disagree, 1.0))).unwrap();
        assert_eq!(s, 0.5);
        assert!(retained(s, DEFAULT_TAU_C));
    }

    fn trace() -> Trace {
        Trace {
            trace_id: "t".into(),
            task: TaskSpec {
                problem_statement: "Capital of France?".into(),
                gold_answer: Some("Paris".into()),
                verifier_kind: VerifierKind::Predictive,
                verifier_config: VerifierConfig::default(),
            },
            steps: vec![
                Step::new(0, StepType::Reasoning, "Look it up."),
                Step::new(
                    1,
                    StepType::ToolCall,
                    "search\n{\"q\": \"capital of germany\"}",
                ),
                Step::new(2, StepType::ToolResponse, "Berlin"),
                Step::new(3, StepType::FinalAnswer, "Berlin"),
            ],
        }
    }

    fn run(replies: [&str; 2], crs: u8) -> (ConsensusOutcome, ScriptedGateway) {
        let gw = ScriptedGateway::new(replies);
        let ps = PromptSet::default();
        let tpl = CriticTemplates {
            attribution: &ps.attribution,
            critic_b: &ps.critic_b,
            critic_c: &ps.critic_c,
        };
        let out = validate_attribution(
            &trace(),
            1,
            crs,
            "search\n{\"q\": \"capital of france\"}",
            "answer Berlin judged wrong",
            &gw,
            &tpl,
            DEFAULT_TAU_C,
            0.0,
        )
        .unwrap();
        (out, gw)
    }

    #[test]
    fn both_agree() {
        let (out, gw) = run(
            [
                "LABEL: AGREE\nCONFIDENCE: 0.9\nyes",
                "LABEL: AGREE\nCONFIDENCE: 0.9",
            ],
            1,
        );
        assert!(out.retained);
        assert!((out.score - 2.8 / 3.0).abs() < 1e-12);
        let reqs = gw.requests();
        assert_eq!(reqs.len(), 2);
        let c_prompt: String = reqs[1].messages.iter().map(|m| m.content.clone()).collect();
        assert!(c_prompt.contains("LABEL: AGREE\nCONFIDENCE: 0.9\nyes"));
        assert!(c_prompt.contains("Environment feedback at the point of failure"));
    }

    #[test]
    fn both_disagree() {
        let (out, _) = run(
            [
                "LABEL: DISAGREE\nCONFIDENCE: 1.0",
                "LABEL: DISAGREE\nCONFIDENCE: 1.0",
            ],
            1,
        );
        assert!(!out.retained);
        assert!((out.score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unparseable_b_reply() {
        let (out, _) = run(["no idea", "LABEL: AGREE\nCONFIDENCE: 1"], 1);
        assert!(out.critiques[0].parse_warning);
        assert_eq!(out.critiques[0].label, Label::Partial);
        assert!((out.score - (1.0 + 0.25 + 1.0) / 3.0).abs() < 1e-12);
    }
}
