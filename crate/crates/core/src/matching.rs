//! Registers one reconstructed cloud against a set of candidate surface
//! patches and ranks the candidates by the final CPD σ.

use std::cmp::Ordering;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpd::{register, CpdConfig, PointSet};
use crate::error::{Error, Result};

pub const FOLD_LABEL: &str = "fold/other";

/// A CT-side surface patch to be matched against.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePatch {
    pub id: usize,
    /// `polyp-<diameter>` or [`FOLD_LABEL`].
    pub label: String,
    pub center: Vector3<f64>,
    pub points: PointSet,
    /// Arc length along the phantom centerline, mm.
    pub centerline_position: f64,
}

impl CandidatePatch {
    pub fn is_polyp(&self) -> bool {
        self.label.starts_with("polyp-")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub id: usize,
    pub label: String,
    pub centerline_position: f64,
    /// `+inf` (serialized as `null`) when registration failed.
    #[serde(with = "finite_or_null")]
    pub sigma: f64,
    #[serde(with = "finite_or_null")]
    pub normalized_sigma: f64,
    pub rank: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Scale of the recovered similarity transform (`null` on failure).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// σ² trace of the registration; kept in memory only.
    #[serde(skip)]
    pub sigma2_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Sorted ascending by σ, ties broken by candidate id.
    pub entries: Vec<MatchEntry>,
    pub best: usize,
    pub sigma_min: f64,
    pub normalization_reference: usize,
}

impl MatchReport {
    pub fn entry(&self, id: usize) -> Option<&MatchEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entry_by_label(&self, label: &str) -> Option<&MatchEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    pub fn best_entry(&self) -> &MatchEntry {
        self.entry(self.best).expect("best id is always present")
    }
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn by_sigma_then_id(a: &MatchEntry, b: &MatchEntry) -> Ordering {
    a.sigma.total_cmp(&b.sigma).then(a.id.cmp(&b.id))
}

/// Registers `source` (moving) onto every candidate (target) and ranks by σ.
///
/// `reference_label` names the ground-truth candidate used to normalize σ;
/// when absent or not found, the rank-1 candidate is the reference.
pub fn match_all(
    source: &PointSet,
    candidates: &[CandidatePatch],
    config: &CpdConfig,
    reference_label: Option<&str>,
) -> Result<MatchReport> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    config.validate()?;
    crate::cpd::normalize_pointset(source)?;
    let mut entries: Vec<MatchEntry> = candidates
        .par_iter()
        .map(|c| {
            let base = MatchEntry {
                id: c.id,
                label: c.label.clone(),
                centerline_position: c.centerline_position,
                sigma: f64::INFINITY,
                normalized_sigma: f64::INFINITY,
                rank: 0,
                iterations: 0,
                converged: false,
                scale: None,
                sigma2_history: Vec::new(),
            };
            match register(&c.points, source, config) {
                Ok(r) => MatchEntry {
                    sigma: r.sigma,
                    iterations: r.iterations,
                    converged: r.converged,
                    scale: Some(r.transform.scale()),
                    sigma2_history: r.sigma2_history,
                    ..base
                },
                Err(e) => {
                    log::warn!("candidate {} failed to register: {e}", c.id);
                    base
                }
            }
        })
        .collect();
    assemble(&mut entries, reference_label)?;
    let best = entries
        .iter()
        .filter(|e| e.converged && e.sigma.is_finite())
        .min_by(|a, b| by_sigma_then_id(a, b))
        .unwrap_or(&entries[0])
        .id;
    let sigma_min = entries[0].sigma;
    let normalization_reference = entries
        .iter()
        .find(|e| e.normalized_sigma == 1.0 && e.sigma.is_finite())
        .map(|e| e.id)
        .unwrap_or(entries[0].id);
    Ok(MatchReport {
        entries,
        best,
        sigma_min,
        normalization_reference,
    })
}

fn assemble(entries: &mut [MatchEntry], reference_label: Option<&str>) -> Result<()> {
    entries.sort_by(by_sigma_then_id);
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    let reference = reference_label
        .and_then(|l| {
            entries
                .iter()
                .filter(|e| e.label == l && e.sigma.is_finite())
                .min_by(|a, b| by_sigma_then_id(a, b))
        })
        .or_else(|| entries.first().filter(|e| e.sigma.is_finite()))
        .map(|e| (e.id, e.sigma));
    for e in entries.iter_mut() {
        e.normalized_sigma = match reference {
            Some((id, _)) if id == e.id => 1.0,
            Some((_, s)) => e.sigma / s,
            None => f64::INFINITY,
        };
    }
    Ok(())
}

/// One row of the positional σ profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub id: usize,
    pub label: String,
    pub centerline_position: f64,
    pub sigma: f64,
}

/// σ against centerline position, sorted by position (then id).
pub fn sigma_profile(report: &MatchReport) -> Vec<ProfileRow> {
    let mut rows: Vec<ProfileRow> = report
        .entries
        .iter()
        .map(|e| ProfileRow {
            id: e.id,
            label: e.label.clone(),
            centerline_position: e.centerline_position,
            sigma: e.sigma,
        })
        .collect();
    rows.sort_by(|a, b| {
        a.centerline_position
            .total_cmp(&b.centerline_position)
            .then(a.id.cmp(&b.id))
    });
    rows
}

fn csv_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "inf".to_string()
    }
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("id,label,centerline_position,sigma\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.id,
            r.label,
            csv_number(r.centerline_position),
            csv_number(r.sigma)
        ));
    }
    out
}

/// `id,label,centerline_position,sigma,normalized_sigma,rank`, in rank order.
pub fn report_csv(report: &MatchReport) -> String {
    let mut out = String::from("id,label,centerline_position,sigma,normalized_sigma,rank\n");
    for e in &report.entries {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.id,
            e.label,
            csv_number(e.centerline_position),
            csv_number(e.sigma),
            csv_number(e.normalized_sigma),
            e.rank
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn blob(seed: u64, n: usize, stretch: Vector3<f64>) -> PointSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(
            (0..n)
                .map(|_| {
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                        .component_mul(&stretch)
                })
                .collect(),
        )
        .unwrap()
    }

    fn patch(id: usize, label: &str, pos: f64, points: PointSet) -> CandidatePatch {
        CandidatePatch {
            id,
            label: label.into(),
            center: Vector3::zeros(),
            points,
            centerline_position: pos,
        }
    }

    #[test]
    fn identical_single_candidate() {
        let src = blob(1, 120, Vector3::new(3.0, 2.0, 1.0));
        let report = match_all(&src, &[patch(4, "polyp-15", 10.0, src.clone())], &CpdConfig::default(), Some("polyp-15")).unwrap();
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].normalized_sigma, 1.0);
        assert!(report.entries[0].sigma <= 1e-6);
        assert_eq!(report.best, 4);
        assert_eq!(sigma_profile(&report).len(), 1);
    }

    #[test]
    fn empty_candidates_rejected() {
        let src = blob(1, 10, Vector3::repeat(1.0));
        assert!(matches!(match_all(&src, &[], &CpdConfig::default(), None), Err(Error::NoCandidates)));
    }

    #[test]
    fn degenerate_candidate_scores_infinity() {
        let src = blob(2, 80, Vector3::new(3.0, 2.0, 1.0));
        let flat = PointSet::new(vec![Vector3::new(1.0, 1.0, 1.0); 60]).unwrap();
        let cands = vec![patch(0, FOLD_LABEL, 5.0, flat), patch(1, "polyp-15", 1.0, src.clone())];
        let report = match_all(&src, &cands, &CpdConfig::default(), Some("polyp-15")).unwrap();
        let failed = report.entry(0).unwrap();
        assert!(failed.sigma.is_infinite());
        assert!(!failed.converged);
        assert_eq!(failed.rank, 2);
        assert_eq!(report.best, 1);
        let json = serde_json::to_string(&report).unwrap();
        let back: MatchReport = serde_json::from_str(&json).unwrap();
        let mut expected = report.clone();
        expected.entries.iter_mut().for_each(|e| e.sigma2_history.clear());
        assert_eq!(back, expected);
    }

    #[test]
    fn permutation_does_not_change_ranks() {
        let src = blob(3, 90, Vector3::new(3.0, 1.5, 0.5));
        let cands: Vec<CandidatePatch> = (0..5)
            .map(|i| patch(i, FOLD_LABEL, i as f64, blob(10 + i as u64, 70, Vector3::new(3.0, 1.0 + i as f64 * 0.3, 0.5))))
            .collect();
        let cfg = CpdConfig {
            max_iterations: 40,
            ..CpdConfig::default()
        };
        let a = match_all(&src, &cands, &cfg, None).unwrap();
        let mut rev = cands.clone();
        rev.reverse();
        let b = match_all(&src, &rev, &cfg, None).unwrap();
        assert_eq!(a, b);
        let rows = sigma_profile(&a);
        assert!(rows.windows(2).all(|w| w[0].centerline_position <= w[1].centerline_position));
    }

    #[test]
    fn ties_break_by_id() {
        let mut entries: Vec<MatchEntry> = [3usize, 1, 2]
            .iter()
            .map(|&id| MatchEntry {
                id,
                label: FOLD_LABEL.into(),
                centerline_position: 0.0,
                sigma: 0.5,
                normalized_sigma: 0.0,
                rank: 0,
                iterations: 1,
                converged: true,
                scale: None,
                sigma2_history: Vec::new(),
            })
            .collect();
        assemble(&mut entries, None).unwrap();
        let ids: Vec<usize> = entries.iter().map(|e| e.id).collect();
        assert_eq!(ids, [1, 2, 3]);
        assert_eq!(entries[0].normalized_sigma, 1.0);
    }
}
