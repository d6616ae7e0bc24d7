//! Rule-based numeric mutations, for offline runs.
//!
//! Each proposal replaces exactly one numeric literal. The schedule is the
//! hinted payload first (when given), then for every literal left to right:
//! +1, -1, ×10, and its digits reversed.

use super::{Proposal, Provider};
use crate::execution::find_numerals;
use crate::trace::Trace;

fn candidates(text: &str) -> Vec<String> {
    let negative = text.starts_with('-');
    let body = text.trim_start_matches('-');
    let mut out = Vec::new();
    if !body.contains('.') {
        if let Ok(v) = text.parse::<i128>() {
            out.push((v + 1).to_string());
            out.push((v - 1).to_string());
            out.push((v * 10).to_string());
        }
    } else {
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        let scale = frac.len() as u32;
        let digits = format!("{int}{frac}");
        if let Ok(v) = digits.parse::<i128>() {
            let v = if negative { -v } else { v };
            let unit = 10i128.pow(scale);
            for n in [v + unit, v - unit, v * 10] {
                out.push(scaled(n, scale));
            }
        }
    }
    let rev: String = body.chars().rev().collect();
    let swapped = if negative { format!("-{rev}") } else { rev };
    if swapped != text && !swapped.starts_with('.') && !swapped.ends_with('.') {
        out.push(swapped);
    }
    out
}

fn scaled(n: i128, scale: u32) -> String {
    let sign = if n < 0 { "-" } else { "" };
    let a = n.unsigned_abs();
    let unit = 10u128.pow(scale);
    format!(
        "{sign}{}.{:0width$}",
        a / unit,
        a % unit,
        width = scale as usize
    )
}

/// Up to `k` single-literal edits of step `index`'s payload.
pub fn mutate_numeric(t: &Trace, index: usize, k: usize, hint: Option<&str>) -> Vec<Proposal> {
    let Some(step) = t.steps.get(index) else {
        return Vec::new();
    };
    if index + 1 >= t.steps.len() {
        return Vec::new();
    }
    let payload = &step.payload;
    let numerals = find_numerals(payload);
    let mut payloads: Vec<String> = Vec::new();
    if let Some(h) = hint {
        if !h.is_empty() && h != payload {
            payloads.push(h.to_string());
        }
    }
    if numerals.is_empty() && payloads.is_empty() {
        return Vec::new();
    }
    'outer: for n in &numerals {
        for c in candidates(&n.text) {
            if payloads.len() >= k {
                break 'outer;
            }
            let edited = format!("{}{}{}", &payload[..n.start], c, &payload[n.end..]);
            if edited != *payload && !payloads.contains(&edited) {
                payloads.push(edited);
            }
        }
    }
    payloads
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(n, p)| Proposal {
            step_index: index,
            payload: p,
            provider: Provider::RuleMutator,
            sample_index: n as u32,
            prompt_variant: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Step, StepType, TaskSpec, VerifierConfig, VerifierKind};

    fn with_payload(p: &str) -> Trace {
        Trace {
            trace_id: "t".into(),
            task: TaskSpec {
                problem_statement: "q".into(),
                gold_answer: Some("1".into()),
                verifier_kind: VerifierKind::Numeric,
                verifier_config: VerifierConfig::default(),
            },
            steps: vec![
                Step::new(0, StepType::Reasoning, p),
                Step::new(1, StepType::FinalAnswer, "1"),
            ],
        }
    }

    #[test]
    fn hint_comes_first() {
        let ps = mutate_numeric(&with_payload("compute 6*13"), 0, 3, Some("compute 6*12"));
        assert_eq!(ps[0].payload, "compute 6*12");
        assert_eq!(ps[0].provider, Provider::RuleMutator);
        assert_eq!(ps.len(), 3);
    }

    #[test]
    fn no_digits_gives_nothing() {
        assert!(mutate_numeric(&with_payload("no digits"), 0, 3, None).is_empty());
    }

    #[test]
    fn three_single_edits() {
        let ps = mutate_numeric(&with_payload("x = 7"), 0, 3, None);
        let got: Vec<_> = ps.iter().map(|p| p.payload.as_str()).collect();
        assert_eq!(got, vec!["x = 8", "x = 6", "x = 70"]);
        assert_eq!(
            ps.iter().map(|p| p.sample_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn schedule_walks_literals_in_order() {
        let ps = mutate_numeric(&with_payload("12 and 3.5"), 0, 8, None);
        let got: Vec<_> = ps.iter().map(|p| p.payload.as_str()).collect();
        assert_eq!(
            got,
            vec![
                "13 and 3.5",
                "11 and 3.5",
                "120 and 3.5",
                "21 and 3.5",
                "12 and 4.5",
                "12 and 2.5",
                "12 and 35.0",
                "12 and 5.3"
            ]
        );
    }

    #[test]
    fn final_step_is_never_mutated() {
        assert!(mutate_numeric(&with_payload("7"), 1, 3, None).is_empty());
    }
}
