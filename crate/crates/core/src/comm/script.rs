//! Scripted node failures.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::CommError;

/// Position inside an iteration at which a failure strikes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// The merged reduction of the iteration has been started but neither it
    /// nor the iteration's SpMV has completed.
    BeforeReductionComplete,
    /// The reduction and the SpMV of the iteration have both completed.
    AfterReductionAndSpmv,
}

impl Phase {
    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "before" | "before_reduction_complete" => Some(Phase::BeforeReductionComplete),
            "after" | "after_reduction_and_spmv" => Some(Phase::AfterReductionAndSpmv),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Fraction of the failure-free iteration count.
    Progress(f64),
    Iteration(usize),
}

/// One failure event. Serialized as
/// `{"at_progress": 0.5, "phase": "after_reduction_and_spmv", "victims": [0]}`
/// or with `at_iteration` in place of `at_progress`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent", into = "RawEvent")]
pub struct FailureEvent {
    pub trigger: Trigger,
    pub phase: Phase,
    pub victims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    at_progress: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    at_iteration: Option<usize>,
    phase: Phase,
    victims: Vec<usize>,
}

impl TryFrom<RawEvent> for FailureEvent {
    type Error = String;

    fn try_from(raw: RawEvent) -> Result<Self, Self::Error> {
        let trigger = match (raw.at_progress, raw.at_iteration) {
            (Some(p), None) => Trigger::Progress(p),
            (None, Some(i)) => Trigger::Iteration(i),
            _ => return Err("exactly one of at_progress / at_iteration is required".into()),
        };
        Ok(FailureEvent {
            trigger,
            phase: raw.phase,
            victims: raw.victims,
        })
    }
}

impl From<FailureEvent> for RawEvent {
    fn from(e: FailureEvent) -> Self {
        let (at_progress, at_iteration) = match e.trigger {
            Trigger::Progress(p) => (Some(p), None),
            Trigger::Iteration(i) => (None, Some(i)),
        };
        RawEvent {
            at_progress,
            at_iteration,
            phase: e.phase,
            victims: e.victims,
        }
    }
}

impl FailureEvent {
    pub fn at_iteration(iteration: usize, phase: Phase, victims: Vec<usize>) -> Self {
        FailureEvent {
            trigger: Trigger::Iteration(iteration),
            phase,
            victims,
        }
    }

    pub fn at_progress(fraction: f64, phase: Phase, victims: Vec<usize>) -> Self {
        FailureEvent {
            trigger: Trigger::Progress(fraction),
            phase,
            victims,
        }
    }
}

/// Ordered list of failure events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailureScript {
    pub events: Vec<FailureEvent>,
}

impl FailureScript {
    pub fn new(events: Vec<FailureEvent>) -> Self {
        FailureScript { events }
    }

    pub fn single(event: FailureEvent) -> Self {
        FailureScript {
            events: vec![event],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Accepts a single event object or an array of events.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.is_array() {
            serde_json::from_value(value)
        } else {
            Ok(FailureScript::single(serde_json::from_value(value)?))
        }
    }

    /// Turns progress fractions into iteration numbers, `ceil(f * baseline)`.
    pub fn resolve(&self, baseline_iterations: usize) -> FailureScript {
        let events = self
            .events
            .iter()
            .map(|e| {
                let trigger = match e.trigger {
                    Trigger::Progress(f) => {
                        Trigger::Iteration((f * baseline_iterations as f64).ceil() as usize)
                    }
                    t => t,
                };
                FailureEvent {
                    trigger,
                    ..e.clone()
                }
            })
            .collect();
        FailureScript { events }
    }

    /// Config-time checks: victims distinct and in range, at most `n_redu`
    /// per event, and no event landing while a previous recovery could still
    /// be in progress (events must be at least two iterations apart).
    pub fn validate(&self, nodes: usize, n_redu: usize) -> Result<(), CommError> {
        let mut last: Option<usize> = None;
        for e in &self.events {
            let set: BTreeSet<usize> = e.victims.iter().copied().collect();
            if set.len() != e.victims.len() || e.victims.is_empty() {
                return Err(CommError::BadScript("victims must be distinct and non-empty".into()));
            }
            if let Some(&r) = set.iter().find(|&&r| r >= nodes) {
                return Err(CommError::BadScript(format!("victim {r} outside 0..{nodes}")));
            }
            if e.victims.len() > n_redu {
                return Err(CommError::BadScript(format!(
                    "{} simultaneous victims exceed n_redu = {n_redu}",
                    e.victims.len()
                )));
            }
            if let Trigger::Progress(f) = e.trigger {
                if !(0.0..=1.0).contains(&f) {
                    return Err(CommError::BadScript(format!("progress {f} outside [0, 1]")));
                }
            }
            if let Trigger::Iteration(i) = e.trigger {
                if let Some(prev) = last {
                    if i < prev + 2 {
                        return Err(CommError::BadScript(
                            "failure events closer than two iterations overlap a recovery".into(),
                        ));
                    }
                }
                last = Some(i);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_matches_documented_shape() {
        let text = r#"{"at_progress": 0.5, "phase": "after_reduction_and_spmv", "victims": [0]}"#;
        let script = FailureScript::from_json(text).unwrap();
        assert_eq!(
            script.events[0],
            FailureEvent::at_progress(0.5, Phase::AfterReductionAndSpmv, vec![0])
        );
        let back = serde_json::to_value(&script.events[0]).unwrap();
        assert_eq!(back, serde_json::from_str::<serde_json::Value>(text).unwrap());
    }

    #[test]
    fn array_form_and_iteration_trigger() {
        let text = r#"[{"at_iteration": 4, "phase": "before_reduction_complete", "victims": [1, 2]}]"#;
        let script = FailureScript::from_json(text).unwrap();
        assert_eq!(script.events[0].trigger, Trigger::Iteration(4));
        assert!(FailureScript::from_json(r#"{"phase": "after_reduction_and_spmv", "victims": [0]}"#).is_err());
    }

    #[test]
    fn resolve_rounds_up() {
        let s = FailureScript::single(FailureEvent::at_progress(0.5, Phase::AfterReductionAndSpmv, vec![0]));
        assert_eq!(s.resolve(31).events[0].trigger, Trigger::Iteration(16));
        assert_eq!(s.resolve(30).events[0].trigger, Trigger::Iteration(15));
    }

    #[test]
    fn validation() {
        let ok = FailureScript::single(FailureEvent::at_iteration(3, Phase::AfterReductionAndSpmv, vec![0]));
        assert!(ok.validate(4, 1).is_ok());
        let dup = FailureScript::single(FailureEvent::at_iteration(3, Phase::AfterReductionAndSpmv, vec![0, 0]));
        assert!(dup.validate(4, 2).is_err());
        let too_many = FailureScript::single(FailureEvent::at_iteration(3, Phase::AfterReductionAndSpmv, vec![0, 1]));
        assert!(too_many.validate(4, 1).is_err());
        let overlap = FailureScript::new(vec![
            FailureEvent::at_iteration(3, Phase::AfterReductionAndSpmv, vec![0]),
            FailureEvent::at_iteration(4, Phase::AfterReductionAndSpmv, vec![1]),
        ]);
        assert!(overlap.validate(4, 1).is_err());
        let out_of_range = FailureScript::single(FailureEvent::at_iteration(3, Phase::AfterReductionAndSpmv, vec![7]));
        assert!(out_of_range.validate(4, 1).is_err());
    }
}
