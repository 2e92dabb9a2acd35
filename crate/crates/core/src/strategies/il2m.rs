use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every mean before it is used as a divisor.
pub const MIN_STAT: f64 = 1e-6;

/// Score statistics kept per class and per task.
///
/// `mu_init[c]` is the mean softmax probability of class `c` over its own
/// training samples at the end of the task that introduced it; `mu_cur[c]`
/// is the same quantity on its stored exemplars after the latest task.
/// `conf[t]` is the mean top-1 probability over task `t`'s new-class samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Il2mStats {
    pub mu_init: BTreeMap<usize, f64>,
    pub mu_cur: BTreeMap<usize, f64>,
    pub conf: Vec<f64>,
    pub intro_task: BTreeMap<usize, usize>,
}

impl Il2mStats {
    fn lookup(map: &BTreeMap<usize, f64>, class: usize, what: &str) -> Result<f64> {
        map.get(&class)
            .map(|v| v.max(MIN_STAT))
            .ok_or_else(|| Error::State(format!("no {what} for class {class}")))
    }

    fn conf_at(&self, task: usize) -> Result<f64> {
        self.conf
            .get(task)
            .map(|v| v.max(MIN_STAT))
            .ok_or_else(|| Error::State(format!("no confidence recorded for task {task}")))
    }
}

/// Rectifies old-class scores when the winning class is new at `task`.
///
/// `scores[i]` belongs to `classes[i]`. When the argmax class was introduced
/// at `task`, each old class `c` is scaled by
/// `(mu_init[c] / mu_cur[c]) * (conf[task] / conf[intro_task[c]])`.
/// Otherwise the scores come back unchanged. No renormalisation.
pub fn il2m_rectify(scores: &[f64], classes: &[usize], stats: &Il2mStats, task: usize) -> Result<Vec<f64>> {
    if scores.len() != classes.len() {
        return Err(Error::shape(classes.len(), scores.len()));
    }
    if scores.is_empty() {
        return Err(Error::Config("no scores to rectify".into()));
    }
    let total: f64 = scores.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("scores sum to {total}, expected a probability vector")));
    }
    let intro = |c: usize| {
        stats
            .intro_task
            .get(&c)
            .copied()
            .ok_or_else(|| Error::State(format!("no introduction task for class {c}")))
    };
    let mut out = scores.to_vec();
    let winner = crate::net::argmax(ndarray::ArrayView1::from(scores));
    if intro(classes[winner])? != task {
        return Ok(out);
    }
    let conf_now = stats.conf_at(task)?;
    for (score, &c) in out.iter_mut().zip(classes) {
        let t_c = intro(c)?;
        if t_c == task {
            continue;
        }
        let ratio = Il2mStats::lookup(&stats.mu_init, c, "initial mean")?
            / Il2mStats::lookup(&stats.mu_cur, c, "current mean")?;
        *score *= ratio * (conf_now / stats.conf_at(t_c)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(mu_init: &[f64], mu_cur: &[f64], conf: &[f64], intro: &[usize]) -> Il2mStats {
        Il2mStats {
            mu_init: mu_init.iter().copied().enumerate().collect(),
            mu_cur: mu_cur.iter().copied().enumerate().collect(),
            conf: conf.to_vec(),
            intro_task: intro.iter().copied().enumerate().collect(),
        }
    }

    #[test]
    fn identity_when_stats_agree() {
        let s = stats(&[0.7, 0.7, 0.9], &[0.7, 0.7, 0.9], &[0.8, 0.8], &[0, 0, 1]);
        let scores = [0.2, 0.3, 0.5];
        assert_eq!(il2m_rectify(&scores, &[0, 1, 2], &s, 1).unwrap(), scores);
    }

    #[test]
    fn doubles_old_score_when_ratio_is_two() {
        let s = stats(&[0.8, 0.6, 0.9], &[0.4, 0.6, 0.9], &[0.8, 0.8], &[0, 0, 1]);
        let out = il2m_rectify(&[0.2, 0.1, 0.7], &[0, 1, 2], &s, 1).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
        assert_eq!(out[1], 0.1);
        assert_eq!(out[2], 0.7);
    }

    #[test]
    fn conf_ratio_applies() {
        let s = stats(&[0.5, 0.5, 0.5], &[0.5, 0.5, 0.5], &[0.5, 1.0], &[0, 0, 1]);
        let out = il2m_rectify(&[0.2, 0.2, 0.6], &[0, 1, 2], &s, 1).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn tiny_current_mean_is_clamped() {
        let s = stats(&[0.5, 0.5, 0.5], &[0.0, 0.5, 0.5], &[0.5, 0.5], &[0, 0, 1]);
        let out = il2m_rectify(&[0.1, 0.1, 0.8], &[0, 1, 2], &s, 1).unwrap();
        assert!((out[0] - 0.1 * 0.5 / MIN_STAT).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let s = stats(&[0.5, 0.5], &[0.5, 0.5], &[0.5], &[0, 0]);
        assert!(il2m_rectify(&[0.5, 0.6], &[0, 1], &s, 0).is_err());
        assert!(il2m_rectify(&[0.5, 0.5], &[0], &s, 0).is_err());
        // Class 7 has no statistics.
        assert!(il2m_rectify(&[0.2, 0.8], &[0, 7], &s, 0).is_err());
        // Task 3 has no confidence.
        let s = stats(&[0.5, 0.5], &[0.5, 0.5], &[0.5], &[0, 3]);
        assert!(il2m_rectify(&[0.2, 0.8], &[0, 1], &s, 3).is_err());
    }

    proptest! {
        #[test]
        fn old_winner_leaves_scores_untouched(
            raw in prop::collection::vec(0.01f64..1.0, 4),
            mu in prop::collection::vec(0.01f64..1.0, 8),
            conf in prop::collection::vec(0.01f64..1.0, 3),
        ) {
            let total: f64 = raw.iter().sum();
            let scores: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let s = stats(&mu[..4], &mu[4..], &conf, &[0, 0, 1, 2]);
            let w = crate::net::argmax(ndarray::ArrayView1::from(&scores[..]));
            let out = il2m_rectify(&scores, &[0, 1, 2, 3], &s, 2).unwrap();
            if w != 3 {
                prop_assert_eq!(out, scores);
            } else {
                prop_assert_eq!(out[3], scores[3]);
            }
        }
    }
}
