//! Sub-goal selection: every step of a demonstration is paired with a later
//! state of the same trajectory that the controller should head for.
//!
//! The default rule scores each later state `s_j` by the mean reward
//! collected on the way there, `W(s_j) = (r_{i+1} + ... + r_j) / (j - i)`,
//! and picks the best-scoring state. The mean punishes far-away states, so
//! nearer milestones are preferred over the trajectory's end.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{returns_to_go, Dataset, Trajectory};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SubgoalMethod {
    /// Highest mean reward since the current step.
    WeightedAverage,
    /// Always the trajectory's final state.
    FinalState,
    /// The state `h` steps ahead, clipped to the end.
    FixedHorizon(usize),
    /// The first later step with the largest single reward.
    MaxReward,
}

impl Default for SubgoalMethod {
    fn default() -> Self {
        SubgoalMethod::WeightedAverage
    }
}

impl fmt::Display for SubgoalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubgoalMethod::WeightedAverage => f.write_str("weighted-avg"),
            SubgoalMethod::FinalState => f.write_str("final-state"),
            SubgoalMethod::FixedHorizon(h) => write!(f, "fixed-horizon:{h}"),
            SubgoalMethod::MaxReward => f.write_str("max-reward"),
        }
    }
}

impl FromStr for SubgoalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted-avg" => Ok(SubgoalMethod::WeightedAverage),
            "final-state" => Ok(SubgoalMethod::FinalState),
            "max-reward" => Ok(SubgoalMethod::MaxReward),
            other => {
                let h = other
                    .strip_prefix("fixed-horizon:")
                    .and_then(|h| h.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown sub-goal method `{other}`")))?;
                if h == 0 {
                    return Err(Error::InvalidArgument("fixed-horizon requires h >= 1".into()));
                }
                Ok(SubgoalMethod::FixedHorizon(h))
            }
        }
    }
}

impl TryFrom<String> for SubgoalMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SubgoalMethod> for String {
    fn from(m: SubgoalMethod) -> String {
        m.to_string()
    }
}

/// `W(s_j)` for a candidate `j` seen from step `i`.
pub fn subgoal_weight(traj: &Trajectory, i: usize, j: usize) -> Result<f64> {
    if j > traj.last() {
        return Err(Error::IndexOutOfRange(format!(
            "j = {j} beyond final step {}",
            traj.last()
        )));
    }
    if j <= i {
        return Err(Error::IndexOutOfRange(format!("need i < j, got i = {i}, j = {j}")));
    }
    let sum: f64 = traj.rewards[i + 1..=j].iter().sum();
    Ok(sum / (j - i) as f64)
}

/// Index of the sub-goal state for step `i`.
pub fn select_subgoal(traj: &Trajectory, i: usize, method: SubgoalMethod) -> Result<usize> {
    let last = traj.last();
    if i > last {
        return Err(Error::IndexOutOfRange(format!("i = {i} beyond final step {last}")));
    }
    if i == last {
        return Ok(last);
    }
    Ok(match method {
        SubgoalMethod::WeightedAverage => weighted_average_index(&traj.rewards, i),
        SubgoalMethod::FinalState => last,
        SubgoalMethod::FixedHorizon(h) => (i + h).min(last),
        SubgoalMethod::MaxReward => {
            let mut best = i + 1;
            for j in i + 2..=last {
                if traj.rewards[j] > traj.rewards[best] {
                    best = j;
                }
            }
            best
        }
    })
}

/// Running-sum scan over `(i, T]`; earliest index wins ties and the final
/// step is used when no candidate has positive weight.
fn weighted_average_index(rewards: &[f64], i: usize) -> usize {
    let last = rewards.len() - 1;
    let mut acc = 0.0;
    let mut best = None::<(usize, f64)>;
    for (j, r) in rewards.iter().enumerate().skip(i + 1) {
        acc += r;
        let w = acc / (j - i) as f64;
        if best.is_none_or(|(_, bw)| w > bw) {
            best = Some((j, w));
        }
    }
    match best {
        Some((j, w)) if w > 0.0 => j,
        _ => last,
    }
}

/// Sub-goal indices for every step of `traj`.
pub fn subgoal_indices(traj: &Trajectory, method: SubgoalMethod) -> Vec<usize> {
    (0..traj.len())
        .map(|i| select_subgoal(traj, i, method).expect("index within trajectory"))
        .collect()
}

/// Labels every step with its sub-goal state and fills in returns-to-go.
pub fn augment_trajectory(traj: &Trajectory, method: SubgoalMethod) -> Trajectory {
    let mut out = traj.clone();
    out.subgoals = Some(
        subgoal_indices(traj, method)
            .into_iter()
            .map(|j| traj.states[j].clone())
            .collect(),
    );
    out.returns_to_go = Some(returns_to_go(&traj.rewards));
    out
}

/// Labels every trajectory of `dataset`, preserving order.
pub fn augment_dataset(dataset: &Dataset, method: SubgoalMethod) -> Result<Dataset> {
    let trajectories = diffcore::par::map_slice(&dataset.trajectories, |t| augment_trajectory(t, method));
    Dataset::new(dataset.meta.clone(), trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(rewards: &[f64]) -> Trajectory {
        Trajectory::new(
            (0..rewards.len()).map(|i| vec![i as f64]).collect(),
            vec![vec![1.0]; rewards.len()],
            rewards.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn weight_examples() {
        let t = traj(&[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(subgoal_weight(&t, 0, 4).unwrap(), 0.25);
        let t = traj(&[0.0, 5.0, 0.0, 1.0, 0.0]);
        assert_eq!(subgoal_weight(&t, 0, 2).unwrap(), 2.5);
        let t = traj(&[0.0; 6]);
        assert_eq!(subgoal_weight(&t, 1, 5).unwrap(), 0.0);
    }

    #[test]
    fn weight_rejects_bad_indices() {
        let t = traj(&[0.0; 4]);
        assert!(subgoal_weight(&t, 2, 2).is_err());
        assert!(subgoal_weight(&t, 3, 1).is_err());
        assert!(subgoal_weight(&t, 0, 4).is_err());
        assert!(select_subgoal(&t, 4, SubgoalMethod::FinalState).is_err());
    }

    #[test]
    fn selection_examples() {
        let wa = SubgoalMethod::WeightedAverage;
        assert_eq!(select_subgoal(&traj(&[0.0, 0.0, 0.0, 0.0, 1.0]), 0, wa).unwrap(), 4);
        assert_eq!(select_subgoal(&traj(&[1.0; 5]), 0, wa).unwrap(), 1);
        assert_eq!(select_subgoal(&traj(&[0.0, 5.0, 0.0, 1.0, 0.0]), 0, wa).unwrap(), 1);
    }

    #[test]
    fn augment_examples() {
        let wa = SubgoalMethod::WeightedAverage;
        assert_eq!(subgoal_indices(&traj(&[0.0, 0.0, 0.0, 0.0, 1.0]), wa), vec![4; 5]);
        assert_eq!(subgoal_indices(&traj(&[1.0; 5]), wa), vec![1, 2, 3, 4, 4]);
        let single = augment_trajectory(&traj(&[3.0]), wa);
        assert_eq!(single.subgoals.unwrap(), vec![vec![0.0]]);
    }

    #[test]
    fn other_methods() {
        let t = traj(&[0.0, 2.0, 0.0, 2.0, 1.0, 0.0]);
        assert_eq!(subgoal_indices(&t, SubgoalMethod::FinalState), vec![5; 6]);
        assert_eq!(
            subgoal_indices(&t, SubgoalMethod::FixedHorizon(2)),
            vec![2, 3, 4, 5, 5, 5]
        );
        assert_eq!(subgoal_indices(&t, SubgoalMethod::MaxReward), vec![1, 3, 3, 4, 5, 5]);
    }

    #[test]
    fn negative_weights_fall_back_to_final_state() {
        let t = traj(&[0.0, -1.0, -2.0, 0.0]);
        assert_eq!(select_subgoal(&t, 0, SubgoalMethod::WeightedAverage).unwrap(), 3);
    }

    #[test]
    fn method_names_round_trip() {
        for s in ["weighted-avg", "final-state", "fixed-horizon:5", "max-reward"] {
            assert_eq!(s.parse::<SubgoalMethod>().unwrap().to_string(), s);
        }
        assert_eq!(
            "fixed-horizon:5".parse::<SubgoalMethod>().unwrap(),
            SubgoalMethod::FixedHorizon(5)
        );
        assert!("fixed-horizon:0".parse::<SubgoalMethod>().is_err());
        assert!("closest".parse::<SubgoalMethod>().is_err());
    }
}
