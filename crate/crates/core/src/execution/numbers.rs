//! Numeric answer extraction.

use std::sync::OnceLock;

use regex::Regex;

fn numeral_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // digits with optional comma grouping, optional fraction; or a bare fraction
        Regex::new(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?|\.\d+").unwrap()
    })
}

/// A numeric literal located in free text.
#[derive(Clone, Debug, PartialEq)]
pub struct Numeral {
    pub start: usize,
    pub end: usize,
    /// Literal with grouping commas removed and sign applied.
    pub text: String,
    pub value: f64,
}

const CURRENCY: &[char] = &['$', '€', '£', '¥', '₹'];

/// All numerals in `text`, left to right.
///
/// A leading `-` counts as a sign only when it does not follow an operand
/// (so `6-4` yields `6` and `4`, while `is -5` yields `-5`).
pub fn find_numerals(text: &str) -> Vec<Numeral> {
    let mut out = Vec::new();
    for m in numeral_re().find_iter(text) {
        let mut start = m.start();
        let mut negative = false;
        let before = &text[..start];
        let mut rev = before.chars().rev();
        // an identifier character immediately before means this is not a literal
        if let Some(prev) = before.chars().next_back() {
            if prev.is_alphabetic() || prev == '_' {
                continue;
            }
        }
        let mut sign_probe = rev.next();
        let mut skipped = 0usize;
        if let Some(c) = sign_probe {
            if CURRENCY.contains(&c) {
                skipped += c.len_utf8();
                sign_probe = rev.next();
            }
        }
        if let Some(c) = sign_probe {
            if c == '-' || c == '\u{2212}' {
                let operand_before = rev
                    .next()
                    .map(|p| p.is_alphanumeric() || p == ')' || p == '.')
                    .unwrap_or(false);
                if !operand_before {
                    negative = true;
                    start -= skipped + c.len_utf8();
                }
            }
        }
        let digits: String = m.as_str().chars().filter(|c| *c != ',').collect();
        let text_val = if negative {
            format!("-{digits}")
        } else {
            digits
        };
        if let Ok(value) = text_val.parse::<f64>() {
            out.push(Numeral {
                start,
                end: m.end(),
                text: text_val,
                value,
            });
        }
    }
    out
}

/// The last numeric literal in `text`, or `None`.
pub fn extract_number(text: &str) -> Option<f64> {
    find_numerals(text).last().map(|n| n.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_cases() {
        assert_eq!(extract_number("The answer is 42."), Some(42.0));
        assert_eq!(extract_number("costs $1,234 total"), Some(1234.0));
        assert_eq!(extract_number("no numbers here"), None);
    }

    #[test]
    fn sign_handling() {
        assert_eq!(extract_number("compute 6-4"), Some(4.0));
        assert_eq!(extract_number("the balance is -5"), Some(-5.0));
        assert_eq!(extract_number("lost -$20"), Some(-20.0));
        assert_eq!(extract_number("(3)-2"), Some(2.0));
    }

    #[test]
    fn identifiers_are_skipped() {
        assert_eq!(extract_number("step x2 done"), None);
        assert_eq!(extract_number("x2 then 7"), Some(7.0));
    }

    #[test]
    fn spans_cover_literal() {
        let s = "6 * 12 = 72";
        let ns = find_numerals(s);
        assert_eq!(ns.len(), 3);
        assert_eq!(&s[ns[1].start..ns[1].end], "12");
    }

    /// Backward character scan, written without the regex: find the last
    /// digit, extend left over digits, grouping commas and one decimal
    /// point, then apply a sign that does not follow an operand.
    fn scan_last(text: &str) -> Option<f64> {
        let cs: Vec<char> = text.chars().collect();
        let mut limit = cs.len();
        loop {
            let last = (0..limit).rev().find(|&i| cs[i].is_ascii_digit())?;
            let mut start = last;
            let mut seen_dot = false;
            while start > 0 {
                let c = cs[start - 1];
                let next_digit = cs[start].is_ascii_digit();
                if c.is_ascii_digit()
                    || (c == ',' && next_digit && start >= 2 && cs[start - 2].is_ascii_digit())
                {
                    start -= 1;
                } else if c == '.' && next_digit && !seen_dot {
                    seen_dot = true;
                    start -= 1;
                } else {
                    break;
                }
            }
            if start > 0 && (cs[start - 1].is_alphabetic() || cs[start - 1] == '_') {
                limit = start;
                continue;
            }
            let body: String = cs[start..=last].iter().filter(|c| **c != ',').collect();
            let mut value: f64 = body.parse().ok()?;
            let mut j = start;
            if j > 0 && CURRENCY.contains(&cs[j - 1]) {
                j -= 1;
            }
            if j > 0 && (cs[j - 1] == '-' || cs[j - 1] == '\u{2212}') {
                let operand =
                    j >= 2 && (cs[j - 2].is_alphanumeric() || cs[j - 2] == ')' || cs[j - 2] == '.');
                if !operand {
                    value = -value;
                }
            }
            return Some(value);
        }
    }

    /// Hand-checked answers; the scanner above must agree on every one.
    const FIXTURE: [(&str, Option<f64>); 30] = [
        ("The answer is 42.", Some(42.0)),
        ("costs $1,234 total", Some(1234.0)),
        ("no numbers here", None),
        ("", None),
        ("72", Some(72.0)),
        ("6 * 12 = 72", Some(72.0)),
        ("The crate holds 78 eggs.", Some(78.0)),
        ("Final answer: 3.75", Some(3.75)),
        ("about .5 of it", Some(0.5)),
        ("the balance is -5", Some(-5.0)),
        ("compute 6-4", Some(4.0)),
        ("lost -$20", Some(-20.0)),
        ("(3)-2", Some(2.0)),
        ("temperature fell to \u{2212}7 degrees", Some(-7.0)),
        ("population 1,000,000 people", Some(1_000_000.0)),
        ("x2 then 7", Some(7.0)),
        ("step x2 done", None),
        ("var_9 holds nothing", None),
        ("between 3 and 4, pick 4", Some(4.0)),
        ("1,5 and 9", Some(9.0)),
        ("ratio 12.50 exactly", Some(12.5)),
        ("€15 each", Some(15.0)),
        ("we need 0 more", Some(0.0)),
        ("It is 2024 and 18 apples remain", Some(18.0)),
        ("answer: **36**", Some(36.0)),
        ("\\boxed{144}", Some(144.0)),
        ("The total is 1,234.5 dollars", Some(1234.5)),
        ("pages 10-12", Some(12.0)),
        ("end with 5.", Some(5.0)),
        ("score: -0.25", Some(-0.25)),
    ];

    #[test]
    fn fixture_matches_independent_scanner() {
        for (text, want) in FIXTURE {
            assert_eq!(scan_last(text), want, "scanner on {text:?}");
            assert_eq!(extract_number(text), want, "extract_number on {text:?}");
        }
    }
}
