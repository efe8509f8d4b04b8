//! Generalized advantage estimation over a single environment's
//! trajectory slice, with hard resets at episode boundaries.

use super::LearnerError;

/// Compute advantages and value targets for one trajectory stream.
///
/// `values` carries one extra entry: the bootstrap value for the state
/// after the last transition. A `true` in `dones` cuts both the TD target
/// and the advantage recursion at that step — value beyond a terminal is
/// never used, so truncated episodes (timeout or success, where the
/// future still has worth) should fold their bootstrap into the reward
/// before calling, leaving `dones` to mark only hard resets.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), LearnerError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(LearnerError::ShapeMismatch {
            what: "gae trajectory arrays",
            detail: format!(
                "rewards {n}, values {} (want {}), dones {}",
                values.len(),
                n + 1,
                dones.len()
            ),
        });
    }
    if !(0.0..=1.0).contains(&discount) || !(0.0..=1.0).contains(&lambda) {
        return Err(LearnerError::InvalidConfig(format!(
            "discount {discount} and lambda {lambda} must lie in [0, 1]"
        )));
    }
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let nonterminal = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + discount * values[t + 1] * nonterminal - values[t];
        acc = delta + discount * lambda * nonterminal * acc;
        advantages[t] = acc;
    }
    let returns: Vec<f64> = advantages
        .iter()
        .zip(values.iter())
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, returns))
}
