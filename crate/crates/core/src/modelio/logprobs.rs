use alloc::format;

use super::ClientError;
use crate::confidence::VerificationLogits;
use crate::math::log_add_exp;

fn normalize_token(token: &str) -> &str {
    token
        .trim()
        .trim_start_matches(['\u{2581}', '\u{0120}'])
        .trim()
}

/// Extracts yes/no logits from the top log-probabilities of the first
/// generated position.
///
/// Casing and leading-whitespace variants of each answer are merged by
/// log-sum-exp. When only one class appears, the smallest listed
/// log-probability bounds the missing class from above and is used for it.
pub fn yes_no_logits<S: AsRef<str>>(top_logprobs: &[(S, f64)]) -> Result<VerificationLogits, ClientError> {
    let mut yes = f64::NEG_INFINITY;
    let mut no = f64::NEG_INFINITY;
    let mut floor = f64::INFINITY;
    for (token, lp) in top_logprobs {
        if !lp.is_finite() {
            continue;
        }
        floor = floor.min(*lp);
        let t = normalize_token(token.as_ref());
        if t.eq_ignore_ascii_case("yes") {
            yes = log_add_exp(yes, *lp);
        } else if t.eq_ignore_ascii_case("no") {
            no = log_add_exp(no, *lp);
        }
    }
    match (yes.is_finite(), no.is_finite()) {
        (false, false) => Err(ClientError::capability(format!(
            "neither yes nor no among {} top log-probabilities",
            top_logprobs.len()
        ))),
        (true, false) => Ok(VerificationLogits {
            logit_yes: yes,
            logit_no: floor,
        }),
        (false, true) => Ok(VerificationLogits {
            logit_yes: floor,
            logit_no: no,
        }),
        (true, true) => Ok(VerificationLogits {
            logit_yes: yes,
            logit_no: no,
        }),
    }
}
