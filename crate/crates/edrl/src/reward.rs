//! Edit-distance reward shaping: scatter hypothesis tokens to characters,
//! compute per-character error increments against the reference, gather them
//! into per-token errors, apply the reward rule, and propagate discounted
//! values over the full action sequence.
//!
//! Error definition: D(j) = min over reference prefixes i of
//! EditDistance(hyp[..j], ref[..i]), with D(0) = 0. D is non-decreasing with
//! unit steps, so per-character increments are in {0, 1}.

use serde::{Deserialize, Serialize};

use crate::beam::{Action, Trajectory};
use crate::error::{Error, Result};

/// Token id -> constituent character string. Blank has no entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScatterMap {
    tokens: Vec<String>,
}

impl ScatterMap {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Config("every token must scatter to >= 1 character".into()));
        }
        Ok(ScatterMap { tokens })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_str(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Contract(format!("token id {id} has no scatter entry")))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Concatenated character string of a token-id sequence.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token_str(id)?);
        }
        Ok(s)
    }
}

/// How incorrect emissions are penalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeMode {
    /// Reward -e_u (the raw edit-distance increase).
    RawEditDistance,
    /// Diagnostic mode: constant -1 for any incorrect token.
    ConstantMinusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdrlConfig {
    pub gamma: f64,
    pub r_p: f64,
    pub negative_mode: NegativeMode,
}

impl Default for EdrlConfig {
    fn default() -> Self {
        EdrlConfig {
            gamma: 0.95,
            r_p: 0.1,
            negative_mode: NegativeMode::RawEditDistance,
        }
    }
}

impl EdrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if self.r_p <= 0.0 {
            return Err(Error::Config(format!("r_p must be positive, got {}", self.r_p)));
        }
        Ok(())
    }
}

/// Full reward pipeline output for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrace {
    pub char_increments: Vec<u32>,
    pub token_errors: Vec<u32>,
    pub token_rewards: Vec<f64>,
    pub action_values: Vec<f64>,
}

/// Per-character error increments of the hypothesis against the reference.
pub fn prefix_error_increments(hyp: &[char], reference: &[char]) -> Vec<u32> {
    // dist[i] = EditDistance(hyp[..j], ref[..i]) for the current j
    let mut dist: Vec<u32> = (0..=reference.len() as u32).collect();
    let mut increments = Vec::with_capacity(hyp.len());
    let mut prev_min = 0u32; // D(0)
    for &hc in hyp {
        let mut prev_diag = dist[0];
        dist[0] += 1; // ED(hyp[..j], "") = j
        let mut row_min = dist[0];
        for i in 1..=reference.len() {
            let sub = prev_diag + u32::from(reference[i - 1] != hc);
            let del = dist[i] + 1; // insert hyp char
            let ins = dist[i - 1] + 1; // delete ref char
            prev_diag = dist[i];
            dist[i] = sub.min(del).min(ins);
            row_min = row_min.min(dist[i]);
        }
        increments.push(row_min - prev_min);
        prev_min = row_min;
    }
    increments
}

/// Gather character increments into per-token errors by token span.
pub fn scatter_and_gather(
    tokens: &[usize],
    map: &ScatterMap,
    char_increments: &[u32],
) -> Result<Vec<u32>> {
    let mut errors = Vec::with_capacity(tokens.len());
    let mut pos = 0usize;
    for &tok in tokens {
        let len = map.token_str(tok)?.chars().count();
        if pos + len > char_increments.len() {
            return Err(Error::Contract(format!(
                "scatter map and hypothesis disagree: token span ends at {} but only {} increments",
                pos + len,
                char_increments.len()
            )));
        }
        errors.push(char_increments[pos..pos + len].iter().sum());
        pos += len;
    }
    if pos != char_increments.len() {
        return Err(Error::Contract(format!(
            "scatter map and hypothesis disagree: tokens cover {pos} characters, increments cover {}",
            char_increments.len()
        )));
    }
    Ok(errors)
}

/// The reward rule: -e_u for errors, r_p otherwise.
pub fn token_rewards(errors: &[u32], config: &EdrlConfig) -> Vec<f64> {
    errors
        .iter()
        .map(|&e| {
            if e > 0 {
                match config.negative_mode {
                    NegativeMode::RawEditDistance => -(e as f64),
                    NegativeMode::ConstantMinusOne => -1.0,
                }
            } else {
                config.r_p
            }
        })
        .collect()
}

/// Discounted value per action: V_k = r_k + gamma * V_{k+1} with terminal
/// value 0. Emissions carry their token reward; blanks carry immediate
/// reward 0 and receive credit only through discounted future values.
pub fn action_values(actions: &[Action], rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let emits = actions.iter().filter(|a| matches!(a, Action::Emit(_))).count();
    if emits != rewards.len() {
        return Err(Error::Contract(format!(
            "{emits} emissions but {} token rewards",
            rewards.len()
        )));
    }
    let mut values = vec![0.0; actions.len()];
    let mut future = 0.0;
    let mut reward_idx = rewards.len();
    for (k, action) in actions.iter().enumerate().rev() {
        let r = match action {
            Action::Emit(_) => {
                reward_idx -= 1;
                rewards[reward_idx]
            }
            Action::Blank => 0.0,
        };
        future = r + gamma * future;
        values[k] = future;
    }
    Ok(values)
}

/// End-to-end pipeline for one trajectory against a reference text.
pub fn reward_trace(
    trajectory: &Trajectory,
    reference_text: &str,
    map: &ScatterMap,
    config: &EdrlConfig,
) -> Result<RewardTrace> {
    config.validate()?;
    let hyp_text = map.detokenize(&trajectory.tokens)?;
    let hyp_chars: Vec<char> = hyp_text.chars().collect();
    let ref_chars: Vec<char> = reference_text.chars().collect();
    let char_increments = prefix_error_increments(&hyp_chars, &ref_chars);
    let token_errors = scatter_and_gather(&trajectory.tokens, map, &char_increments)?;
    let rewards = token_rewards(&token_errors, config);
    let values = action_values(&trajectory.actions, &rewards, config.gamma)?;
    Ok(RewardTrace {
        char_increments,
        token_errors,
        token_rewards: rewards,
        action_values: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Independent quadratic oracle: full edit-distance matrix recomputed
    /// from scratch for every (hypothesis prefix, reference prefix) pair.
    pub(crate) fn oracle_prefix_min(hyp: &[char], reference: &[char], j: usize) -> u32 {
        (0..=reference.len())
            .map(|i| plain_edit_distance(&hyp[..j], &reference[..i]))
            .min()
            .unwrap()
    }

    pub(crate) fn plain_edit_distance(a: &[char], b: &[char]) -> u32 {
        let mut d: Vec<Vec<u32>> = vec![vec![0; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i as u32;
        }
        for j in 0..=b.len() {
            d[0][j] = j as u32;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = d[i - 1][j - 1] + u32::from(a[i - 1] != b[j - 1]);
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn figure_fixture_increments() {
        let incs = prefix_error_increments(&chars("helo whyld"), &chars("hello world"));
        assert_eq!(incs, vec![0, 0, 0, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(incs.iter().sum::<u32>(), 3);
    }

    #[test]
    fn identical_strings_are_zero() {
        let incs = prefix_error_increments(&chars("hello"), &chars("hello"));
        assert_eq!(incs, vec![0; 5]);
    }

    #[test]
    fn empty_reference_all_insertions() {
        let incs = prefix_error_increments(&chars("abc"), &[]);
        assert_eq!(incs, vec![1, 1, 1]);
    }

    #[test]
    fn empty_hypothesis() {
        assert!(prefix_error_increments(&[], &chars("abc")).is_empty());
    }

    #[test]
    fn figure_fixture_gather() {
        let map = ScatterMap::new(
            ["hel", "o", " why", "ld"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let incs = prefix_error_increments(&chars("helo whyld"), &chars("hello world"));
        let errors = scatter_and_gather(&[0, 1, 2, 3], &map, &incs).unwrap();
        assert_eq!(errors, vec![0, 1, 2, 0]);
        let rewards = token_rewards(&errors, &EdrlConfig::default());
        assert_eq!(rewards, vec![0.1, -1.0, -2.0, 0.1]);
    }

    #[test]
    fn single_char_tokens_match_increments() {
        let map = ScatterMap::new(vec!["a".into(), "b".into()]).unwrap();
        let incs = prefix_error_increments(&chars("ab"), &chars("bb"));
        let errors = scatter_and_gather(&[0, 1], &map, &incs).unwrap();
        assert_eq!(errors, incs);
    }

    #[test]
    fn gather_mismatch_is_contract_error() {
        let map = ScatterMap::new(vec!["ab".into()]).unwrap();
        assert!(scatter_and_gather(&[0], &map, &[0, 0, 0]).is_err());
        assert!(scatter_and_gather(&[0, 0], &map, &[0, 0, 0]).is_err());
    }

    #[test]
    fn constant_mode_rewards() {
        let cfg = EdrlConfig {
            negative_mode: NegativeMode::ConstantMinusOne,
            ..EdrlConfig::default()
        };
        assert_eq!(token_rewards(&[0, 3], &cfg), vec![0.1, -1.0]);
    }

    #[test]
    fn value_recursion_worked_example() {
        let actions = [Action::Emit(0), Action::Blank, Action::Emit(1)];
        let v = action_values(&actions, &[0.1, -1.0], 0.95).unwrap();
        assert!((v[0] - -0.8025).abs() < 1e-12);
        assert!((v[1] - -0.95).abs() < 1e-12);
        assert!((v[2] - -1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_collapses_to_immediate_rewards() {
        let actions = [Action::Emit(0), Action::Blank, Action::Emit(1), Action::Blank];
        let v = action_values(&actions, &[0.5, -2.0], 0.0).unwrap();
        assert_eq!(v, vec![0.5, 0.0, -2.0, 0.0]);
    }

    #[test]
    fn single_action_value() {
        let v = action_values(&[Action::Emit(0)], &[0.3], 0.95).unwrap();
        assert_eq!(v, vec![0.3]);
    }

    #[test]
    fn emission_count_mismatch() {
        assert!(action_values(&[Action::Blank], &[1.0], 0.9).is_err());
    }

    #[test]
    fn blank_insertion_discounts_future_reward() {
        // with gamma < 1, a blank in front of a reward strictly discounts it
        let gamma = 0.9;
        let direct = action_values(&[Action::Emit(0), Action::Blank], &[1.0], gamma).unwrap();
        let delayed =
            action_values(&[Action::Blank, Action::Emit(0), Action::Blank], &[1.0], gamma)
                .unwrap();
        assert!(delayed[0] < direct[0]);
        // with gamma == 1 interleaving does not matter
        let a = action_values(&[Action::Emit(0), Action::Blank], &[1.0], 1.0).unwrap();
        let b = action_values(&[Action::Blank, Action::Emit(0), Action::Blank], &[1.0], 1.0)
            .unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn full_pipeline_on_figure_fixture() {
        let map = ScatterMap::new(
            ["hel", "o", " why", "ld"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let traj = Trajectory {
            actions: vec![
                Action::Emit(0),
                Action::Blank,
                Action::Emit(1),
                Action::Emit(2),
                Action::Blank,
                Action::Emit(3),
                Action::Blank,
            ],
            action_logprobs: vec![0.0; 7],
            tokens: vec![0, 1, 2, 3],
            score: 0.0,
        };
        let trace = reward_trace(&traj, "hello world", &map, &EdrlConfig::default()).unwrap();
        assert_eq!(trace.char_increments, vec![0, 0, 0, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(trace.token_errors, vec![0, 1, 2, 0]);
        assert_eq!(trace.token_rewards, vec![0.1, -1.0, -2.0, 0.1]);
        assert_eq!(trace.action_values.len(), 7);
    }

    #[test]
    fn perfect_hypothesis_all_positive_values() {
        let map = ScatterMap::new(vec!["ab".into(), "c".into()]).unwrap();
        let traj = Trajectory {
            actions: vec![Action::Emit(0), Action::Blank, Action::Emit(1), Action::Blank],
            action_logprobs: vec![0.0; 4],
            tokens: vec![0, 1],
            score: 0.0,
        };
        let trace = reward_trace(&traj, "abc", &map, &EdrlConfig::default()).unwrap();
        assert!(trace.token_rewards.iter().all(|r| *r == 0.1));
        // every action up to and including the last emission has positive
        // value; the trailing blank carries no future reward and is 0
        assert!(trace.action_values[..3].iter().all(|v| *v > 0.0));
        assert_eq!(trace.action_values[3], 0.0);
    }

    #[test]
    fn all_blank_trajectory_has_zero_values() {
        let map = ScatterMap::new(vec!["a".into()]).unwrap();
        let traj = Trajectory {
            actions: vec![Action::Blank, Action::Blank],
            action_logprobs: vec![0.0; 2],
            tokens: vec![],
            score: 0.0,
        };
        let trace = reward_trace(&traj, "a", &map, &EdrlConfig::default()).unwrap();
        assert!(trace.token_rewards.is_empty());
        assert_eq!(trace.action_values, vec![0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn increments_are_unit_and_match_oracle(
            hyp in "[abc ]{0,12}",
            reference in "[abc ]{0,12}",
        ) {
            let h = chars(&hyp);
            let r = chars(&reference);
            let incs = prefix_error_increments(&h, &r);
            prop_assert_eq!(incs.len(), h.len());
            let mut d = 0u32;
            for (j, inc) in incs.iter().enumerate() {
                prop_assert!(*inc <= 1);
                d += inc;
                prop_assert_eq!(d, oracle_prefix_min(&h, &r, j + 1));
            }
        }

        #[test]
        fn value_bound_and_sign_propagation(
            rewards in proptest::collection::vec(-3.0f64..3.0, 1..8),
            gamma in 0.0f64..0.999,
        ) {
            let actions: Vec<Action> = rewards.iter().map(|_| Action::Emit(0))
                .chain(std::iter::once(Action::Blank)).collect();
            let v = action_values(&actions, &rewards, gamma).unwrap();
            let bound = 3.0 / (1.0 - gamma);
            for val in &v {
                prop_assert!(val.abs() <= bound + 1e-9);
            }
            if rewards.iter().all(|r| *r > 0.0) {
                // blanks at the tail have value 0 only if nothing follows them
                for (i, val) in v.iter().enumerate().take(rewards.len()) {
                    prop_assert!(*val > 0.0, "positive rewards give positive values at {}", i);
                }
            }
            if rewards.iter().all(|r| *r < 0.0) {
                for val in v.iter().take(rewards.len()) {
                    prop_assert!(*val < 0.0);
                }
            }
        }
    }
}
