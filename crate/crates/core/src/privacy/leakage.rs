//! What an observer can reconstruct from aggregated gradients.
//!
//! For linear regression with shard-mean gradients, the honest gradient sum
//! at a public model `w` is `s = A·w − b` with `A = Σ_h X_hᵀX_h / n_h` and
//! `b = Σ_h X_hᵀy_h / n_h`. Given `d + 1` affinely independent public models
//! `A` and `b` follow by least squares. The attack needs the model at which
//! the gradients were taken; confined models never leave their owners.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::Serialize;

use super::AdversaryView;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::ring::{FixedPointCodec, ParticipantId};
use crate::transport::{LocalNote, MessageKind, Transcript};

/// Relative singular-value cutoff below which the design is rank deficient.
const RANK_TOL: f64 = 1e-10;

/// The honest gradient sum `s` observed at model `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub w: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovered {
    /// Estimate of `Σ_h X_hᵀX_h / n_h`, symmetrized.
    pub gram: Matrix,
    /// Estimate of `Σ_h X_hᵀy_h / n_h`.
    pub cross: Vec<f64>,
}

/// Solves `s_k = A·w_k − b` for `A` and `b` by least squares over the rows
/// `[w_kᵀ, −1]`.
pub fn leakage_extract_linreg(obs: &[Observation], d: usize) -> Result<Recovered> {
    if d == 0 {
        return Err(Error::arg("dimension must be positive"));
    }
    if obs.len() < d + 1 {
        return Err(Error::RankDeficient(format!(
            "{} observations cannot determine {} unknowns per coordinate",
            obs.len(),
            d + 1
        )));
    }
    for o in obs {
        if o.w.len() != d || o.s.len() != d {
            return Err(Error::shape("observation", d, o.w.len().max(o.s.len())));
        }
    }
    let k = obs.len();
    let design = DMatrix::from_fn(k, d + 1, |r, c| if c < d { obs[r].w[c] } else { -1.0 });
    let target = DMatrix::from_fn(k, d, |r, c| obs[r].s[c]);
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min / max < RANK_TOL {
        return Err(Error::RankDeficient(format!(
            "observed models are affinely dependent (singular value ratio {:.2e})",
            if max > 0.0 { min / max } else { 0.0 }
        )));
    }
    let theta = svd
        .solve(&target, RANK_TOL * max)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let gram = Matrix::from_fn(d, d, |r, c| 0.5 * (theta[(c, r)] + theta[(r, c)]));
    let cross = (0..d).map(|c| theta[(d, c)]).collect();
    Ok(Recovered { gram, cross })
}

/// Pairs each round's public shared model with the honest residual of the
/// (single-layer) gradient sum taken at it.
pub fn observations_from_view(view: &AdversaryView, codec: &FixedPointCodec) -> Result<Vec<Observation>> {
    let mut models: BTreeMap<u32, &Vec<f64>> = BTreeMap::new();
    for v in view.members.values() {
        for n in &v.notes {
            if let LocalNote::SharedModel { round, weights } = n {
                models.insert(*round, weights);
            }
        }
    }
    if models.is_empty() {
        return Err(Error::RankDeficient(
            "the view holds no public model: every gradient was taken at a private confined model".into(),
        ));
    }
    let residuals = view.honest_residuals();
    let mut out = Vec::new();
    for (round, w) in models {
        if let Some(s) = residuals.get(&(round, 1, 0)) {
            out.push(Observation {
                w: w.clone(),
                s: codec.decode(s),
            });
        }
    }
    Ok(out)
}

/// Stand-in for the missing public model: the colluder's own confined
/// weights. For linear regression the confined models differ by constant
/// offsets, so this recovers `A` but only `b` shifted by `Σ_h A_h·Δ_h`.
pub fn proxy_observations(
    view: &AdversaryView,
    member: ParticipantId,
    codec: &FixedPointCodec,
) -> Result<Vec<Observation>> {
    let mv = view
        .members
        .get(&member)
        .ok_or_else(|| Error::arg(format!("{member} is not in the coalition")))?;
    let residuals = view.honest_residuals();
    Ok(mv
        .notes
        .iter()
        .filter_map(|n| match n {
            LocalNote::ConfinedModel { round, weights } => residuals.get(&(*round, 1, 0)).map(|s| Observation {
                w: weights.clone(),
                s: codec.decode(s),
            }),
            LocalNote::SharedModel { .. } => None,
        })
        .collect())
}

/// `‖est − truth‖₂ / ‖truth‖₂`.
pub fn relative_error(est: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    num / den
}

/// A frame whose payload carries a recorded model verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PayloadHit {
    pub observer: u16,
    pub round: u32,
    pub kind: String,
    pub layer_tag: u8,
    pub sender: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayloadScan {
    pub frames: usize,
    pub model_vectors: usize,
    pub hits: Vec<PayloadHit>,
}

/// Looks for any noted model (confined or shared), fixed-point encoded, as a
/// contiguous window of any frame payload.
pub fn scan_model_payloads(t: &Transcript, codec: &FixedPointCodec) -> PayloadScan {
    let encoded: Vec<Vec<u32>> = t
        .notes
        .values()
        .flatten()
        .map(|n| match n {
            LocalNote::SharedModel { weights, .. } | LocalNote::ConfinedModel { weights, .. } => {
                codec.encode(weights).into_inner()
            }
        })
        .filter(|w| !w.is_empty())
        .collect();
    let mut index: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
    for (v, w) in encoded.iter().enumerate() {
        for (pos, &e) in w.iter().enumerate() {
            index.entry(e).or_default().push((v, pos));
        }
    }
    let mut frames = 0;
    let mut hits = Vec::new();
    for (&observer, fs) in &t.frames {
        for f in fs {
            frames += 1;
            let m = f.message();
            let p = m.payload.as_slice();
            if m.kind == MessageKind::Barrier || p.is_empty() {
                continue;
            }
            let found = index.get(&p[0]).is_some_and(|cands| {
                cands.iter().any(|&(v, pos)| {
                    let w = &encoded[v];
                    let len = p.len().min(w.len() - pos);
                    // the payload must lie inside the model or contain all of it
                    (len == p.len() || pos == 0) && w[pos..pos + len] == p[..len]
                })
            });
            if found {
                hits.push(PayloadHit {
                    observer: observer.0,
                    round: m.round,
                    kind: format!("{:?}", m.kind),
                    layer_tag: m.layer_tag,
                    sender: m.sender.0,
                });
            }
        }
    }
    PayloadScan {
        frames,
        model_vectors: encoded.len(),
        hits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gd_observations(a: &[[f64; 3]; 3], b: &[f64; 3], steps: usize) -> Vec<Observation> {
        let mut w = vec![0.3, -0.7, 1.1];
        let mut out = Vec::new();
        for _ in 0..steps {
            let s: Vec<f64> = (0..3).map(|r| (0..3).map(|c| a[r][c] * w[c]).sum::<f64>() - b[r]).collect();
            out.push(Observation { w: w.clone(), s: s.clone() });
            for (wi, si) in w.iter_mut().zip(&s) {
                *wi -= 0.2 * si;
            }
        }
        out
    }

    #[test]
    fn recovers_exact_linear_gradients() {
        let a = [[2.0, 0.3, -0.1], [0.3, 1.5, 0.2], [-0.1, 0.2, 0.9]];
        let b = [0.5, -1.0, 0.25];
        let r = leakage_extract_linreg(&gd_observations(&a, &b, 12), 3).unwrap();
        for i in 0..3 {
            assert!((r.cross[i] - b[i]).abs() < 1e-10);
            for j in 0..3 {
                assert!((r.gram.get(i, j) - a[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn degenerate_observations_are_rank_deficient() {
        let same = vec![
            Observation {
                w: vec![1.0, 2.0],
                s: vec![0.0, 0.0]
            };
            10
        ];
        assert!(matches!(leakage_extract_linreg(&same, 2), Err(Error::RankDeficient(_))));
        let a = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let few = gd_observations(&a, &[1.0, 1.0, 1.0], 3);
        assert!(matches!(leakage_extract_linreg(&few, 3), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn relative_error_is_scale_free() {
        assert!((relative_error(&[2.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((relative_error(&[20.0, 0.0], &[10.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
