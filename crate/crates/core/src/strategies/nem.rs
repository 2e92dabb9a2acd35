use crate::error::{Error, Result};
use crate::rehearsal::ClassMean;

/// Nearest class mean by Euclidean distance. Returns the winning class id
/// and the negated distances in `means` order. Equal distances go to the
/// lowest class id.
pub fn nem_predict(means: &[ClassMean], embedding: &[f64]) -> Result<(usize, Vec<f64>)> {
    if means.is_empty() {
        return Err(Error::State("no class means available".into()));
    }
    let mut scores = Vec::with_capacity(means.len());
    let mut best: Option<(usize, f64)> = None;
    for m in means {
        if m.mean.len() != embedding.len() {
            return Err(Error::shape(m.mean.len(), embedding.len()));
        }
        let d2: f64 = m.mean.iter().zip(embedding).map(|(a, b)| (a - b) * (a - b)).sum();
        scores.push(-d2.sqrt());
        let better = match best {
            None => true,
            Some((c, b)) => d2 < b || (d2 == b && m.class < c),
        };
        if better {
            best = Some((m.class, d2));
        }
    }
    Ok((best.expect("non-empty").0, scores))
}
