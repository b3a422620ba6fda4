//! Human-readable reward traces for a hypothesis/reference pair: greedy
//! tokenization of a raw string and a fixed-width table showing per-character
//! increments, per-token errors and rewards, and discounted action values.

use crate::beam::{Action, Trajectory};
use crate::error::{Error, Result};
use crate::reward::{reward_trace, EdrlConfig, RewardTrace, ScatterMap};

/// Greedy longest-match tokenization of `text` against the vocabulary.
/// Errors name the first position no token covers.
pub fn tokenize_greedy(text: &str, map: &ScatterMap) -> Result<Vec<usize>> {
    let chars: Vec<char> = text.chars().collect();
    let mut ids = Vec::new();
    let mut pos = 0usize;
    while pos < chars.len() {
        let rest: String = chars[pos..].iter().collect();
        let best = map
            .tokens()
            .iter()
            .enumerate()
            .filter(|(_, t)| rest.starts_with(t.as_str()))
            .max_by_key(|(_, t)| t.chars().count());
        match best {
            Some((id, t)) => {
                ids.push(id);
                pos += t.chars().count();
            }
            None => {
                return Err(Error::Contract(format!(
                    "no vocabulary token matches {text:?} at character {pos}"
                )))
            }
        }
    }
    Ok(ids)
}

/// Wrap a bare token sequence as a minimal one-frame trajectory (all
/// emissions followed by the terminal blank) so the reward pipeline applies.
pub fn trajectory_from_tokens(tokens: &[usize]) -> Trajectory {
    let mut actions: Vec<Action> = tokens.iter().map(|&t| Action::Emit(t)).collect();
    actions.push(Action::Blank);
    let action_logprobs = vec![0.0; actions.len()];
    Trajectory {
        actions,
        action_logprobs,
        tokens: tokens.to_vec(),
        score: 0.0,
    }
}

fn pad(s: &str, w: usize) -> String {
    format!("{s:>w$}")
}

/// Render the trace as a table: one row of hypothesis characters with their
/// error increments, one row of tokens with errors e and rewards r, then the
/// action row with discounted values V.
pub fn render_trace(
    trajectory: &Trajectory,
    trace: &RewardTrace,
    map: &ScatterMap,
    reference: &str,
) -> Result<String> {
    let hyp = map.detokenize(&trajectory.tokens)?;
    let mut out = String::new();
    out.push_str(&format!("hyp: {hyp:?}\nref: {reference:?}\n\n"));

    let chars: Vec<String> = hyp.chars().map(|c| format!("{c:?}")).collect();
    let width = chars.iter().map(|c| c.len()).max().unwrap_or(1).max(6);
    let row = |label: &str, cells: &[String]| {
        let mut line = format!("{label:<6}");
        for c in cells {
            line.push_str(&pad(c, width + 1));
        }
        line.push('\n');
        line
    };
    out.push_str(&row("char", &chars));
    let incs: Vec<String> = trace.char_increments.iter().map(|d| d.to_string()).collect();
    out.push_str(&row("dD", &incs));
    out.push('\n');

    let toks: Vec<String> = trajectory
        .tokens
        .iter()
        .map(|&id| map.token_str(id).map(|s| format!("{s:?}")))
        .collect::<Result<_>>()?;
    let twidth = toks.iter().map(|t| t.len()).max().unwrap_or(1).max(7);
    let trow = |label: &str, cells: &[String]| {
        let mut line = format!("{label:<6}");
        for c in cells {
            line.push_str(&pad(c, twidth + 1));
        }
        line.push('\n');
        line
    };
    out.push_str(&trow("token", &toks));
    let errs: Vec<String> = trace.token_errors.iter().map(|e| e.to_string()).collect();
    out.push_str(&trow("e", &errs));
    let rews: Vec<String> = trace.token_rewards.iter().map(|r| format!("{r:.3}")).collect();
    out.push_str(&trow("r", &rews));
    out.push('\n');

    let acts: Vec<String> = trajectory.actions.iter().map(|a| a.render()).collect();
    let vals: Vec<String> = trace.action_values.iter().map(|v| format!("{v:.4}")).collect();
    let awidth = acts
        .iter()
        .chain(vals.iter())
        .map(|s| s.len())
        .max()
        .unwrap_or(1);
    let arow = |label: &str, cells: &[String]| {
        let mut line = format!("{label:<6}");
        for c in cells {
            line.push_str(&pad(c, awidth + 1));
        }
        line.push('\n');
        line
    };
    out.push_str(&arow("action", &acts));
    out.push_str(&arow("V", &vals));
    Ok(out)
}

/// Tokenize, score, and render a hypothesis string against a reference.
pub fn trace_report(
    hyp_text: &str,
    reference: &str,
    map: &ScatterMap,
    config: &EdrlConfig,
) -> Result<String> {
    let tokens = tokenize_greedy(hyp_text, map)?;
    let traj = trajectory_from_tokens(&tokens);
    let trace = reward_trace(&traj, reference, map, config)?;
    render_trace(&traj, &trace, map, reference)
}
