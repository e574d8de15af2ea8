//! Exhaustive grid search over merging coefficients.
//!
//! Assignments are enumerated in lexicographic order: the first declared
//! coefficient varies slowest and each grid is walked in its listed order.
//! The best score is the first extremum in that order, so the result does not
//! depend on whether evaluation ran in parallel.

use std::fmt;

use rayon::prelude::*;
use serde::ser::{Serialize, SerializeMap, Serializer};

use crate::error::{Error, Result};

/// `0.2, 0.3, ..., 1.3`.
pub fn default_grid() -> Vec<f64> {
    (2..=13).map(|i| i as f64 / 10.0).collect()
}

/// One point of the grid, in declared coefficient order.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment(pub Vec<(String, f64)>);

impl Assignment {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(n, v)| format!("{n}={v}")).collect();
        f.write_str(&parts.join(", "))
    }
}

impl Serialize for Assignment {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (n, v) in &self.0 {
            map.serialize_entry(n, v)?;
        }
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    grids: Vec<(String, Vec<f64>)>,
    maximize: bool,
}

impl SearchSpace {
    pub fn new(grids: Vec<(String, Vec<f64>)>, maximize: bool) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::InvalidArgument("search space has no coefficients".into()));
        }
        for (i, (name, values)) in grids.iter().enumerate() {
            if values.is_empty() {
                return Err(Error::InvalidArgument(format!("grid for `{name}` is empty")));
            }
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("grid for `{name}` contains {v}")));
            }
            if grids[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidArgument(format!("coefficient `{name}` declared twice")));
            }
        }
        Ok(Self { grids, maximize })
    }

    pub fn grids(&self) -> &[(String, Vec<f64>)] {
        &self.grids
    }

    pub fn maximize(&self) -> bool {
        self.maximize
    }

    pub fn len(&self) -> usize {
        self.grids.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All assignments in lexicographic order.
    pub fn assignments(&self) -> Vec<Assignment> {
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; self.grids.len()];
        loop {
            out.push(Assignment(
                self.grids
                    .iter()
                    .zip(&idx)
                    .map(|((n, vals), &i)| (n.clone(), vals[i]))
                    .collect(),
            ));
            // odometer: last coefficient varies fastest
            let mut pos = self.grids.len();
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < self.grids[pos].1.len() {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Assignment,
    pub best_score: f64,
    pub trace: Vec<(Assignment, f64)>,
}

fn check_score(assignment: &Assignment, score: f64) -> Result<f64> {
    if score.is_nan() {
        Err(Error::Evaluation {
            assignment: assignment.to_string(),
            message: "evaluator returned NaN".into(),
        })
    } else {
        Ok(score)
    }
}

fn reduce(trace: Vec<(Assignment, f64)>, maximize: bool) -> SearchResult {
    let mut best = 0;
    for (i, (_, s)) in trace.iter().enumerate().skip(1) {
        let better = if maximize { *s > trace[best].1 } else { *s < trace[best].1 };
        if better {
            best = i;
        }
    }
    SearchResult {
        best: trace[best].0.clone(),
        best_score: trace[best].1,
        trace,
    }
}

/// Evaluate every assignment sequentially.
pub fn grid_search<F, E>(space: &SearchSpace, mut evaluate: F) -> Result<SearchResult>
where
    F: FnMut(&Assignment) -> std::result::Result<f64, E>,
    E: fmt::Display,
{
    let mut trace = Vec::with_capacity(space.len());
    for a in space.assignments() {
        let score = evaluate(&a).map_err(|e| Error::Evaluation {
            assignment: a.to_string(),
            message: e.to_string(),
        })?;
        let score = check_score(&a, score)?;
        trace.push((a, score));
    }
    Ok(reduce(trace, space.maximize))
}

/// Evaluate assignments on the rayon pool. Same result as [`grid_search`]
/// for a deterministic evaluator.
pub fn grid_search_par<F, E>(space: &SearchSpace, evaluate: F) -> Result<SearchResult>
where
    F: Fn(&Assignment) -> std::result::Result<f64, E> + Sync,
    E: fmt::Display,
{
    let trace = space
        .assignments()
        .into_par_iter()
        .map(|a| {
            let score = evaluate(&a).map_err(|e| Error::Evaluation {
                assignment: a.to_string(),
                message: e.to_string(),
            })?;
            let score = check_score(&a, score)?;
            Ok((a, score))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(trace, space.maximize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(grids: &[(&str, &[f64])], maximize: bool) -> SearchSpace {
        SearchSpace::new(grids.iter().map(|(n, v)| (n.to_string(), v.to_vec())).collect(), maximize).unwrap()
    }

    #[test]
    fn default_grid_has_twelve_points() {
        let g = default_grid();
        assert_eq!(g.len(), 12);
        assert_eq!(g[0], 0.2);
        assert_eq!(g[5], 0.7);
        assert_eq!(g[11], 1.3);
    }

    #[test]
    fn concave_score_optimum() {
        let s = space(&[("lambda", &[0.2, 0.7, 1.3])], true);
        let r = grid_search(&s, |a| Ok::<_, String>(-(a.get("lambda").unwrap() - 0.7).powi(2))).unwrap();
        assert_eq!(r.best.get("lambda"), Some(0.7));
        assert_eq!(r.trace.len(), 3);
    }

    #[test]
    fn ties_go_to_first_assignment() {
        let s = space(&[("a", &[1.0, 2.0, 3.0])], true);
        let r = grid_search(&s, |a| Ok::<_, String>(if a.get("a").unwrap() >= 2.0 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(r.best.get("a"), Some(2.0));
        let m = space(&[("a", &[1.0, 2.0, 3.0])], false);
        let r = grid_search(&m, |_| Ok::<_, String>(5.0)).unwrap();
        assert_eq!(r.best.get("a"), Some(1.0));
    }

    #[test]
    fn lexicographic_order_and_completeness() {
        let s = space(&[("x", &[1.0, 2.0]), ("y", &[10.0, 20.0, 30.0])], true);
        let order: Vec<(f64, f64)> = s
            .assignments()
            .iter()
            .map(|a| (a.get("x").unwrap(), a.get("y").unwrap()))
            .collect();
        assert_eq!(
            order,
            vec![(1.0, 10.0), (1.0, 20.0), (1.0, 30.0), (2.0, 10.0), (2.0, 20.0), (2.0, 30.0)]
        );
        let mut calls = 0;
        let r = grid_search(&s, |_| {
            calls += 1;
            Ok::<_, String>(0.0)
        })
        .unwrap();
        assert_eq!(calls, 6);
        assert_eq!(r.trace.len(), s.len());
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = space(&[("x", &default_grid()), ("y", &default_grid())], true);
        let f = |a: &Assignment| Ok::<_, String>(-((a.get("x").unwrap() * 10.0).round() % 3.0));
        let seq = grid_search(&s, f).unwrap();
        let par = grid_search_par(&s, f).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn evaluator_failure_names_assignment() {
        let s = space(&[("lambda", &[0.2, 0.5])], true);
        let err = grid_search(&s, |a| {
            if a.get("lambda") == Some(0.5) {
                Err("boom".to_string())
            } else {
                Ok(1.0)
            }
        })
        .unwrap_err();
        match err {
            Error::Evaluation { assignment, message } => {
                assert_eq!(assignment, "lambda=0.5");
                assert_eq!(message, "boom");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(grid_search(&s, |_| Ok::<_, String>(f64::NAN)).is_err());
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(SearchSpace::new(vec![], true).is_err());
        assert!(SearchSpace::new(vec![("a".into(), vec![])], true).is_err());
        assert!(SearchSpace::new(vec![("a".into(), vec![f64::INFINITY])], true).is_err());
        assert!(SearchSpace::new(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])], true).is_err());
    }

    #[test]
    fn assignment_serializes_as_object() {
        let a = Assignment(vec![("b".into(), 0.5), ("a".into(), 1.0)]);
        assert_eq!(serde_json::to_string(&a).unwrap(), r#"{"b":0.5,"a":1.0}"#);
    }
}
