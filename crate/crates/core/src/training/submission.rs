use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{label_pose, Domain, LabelEntry};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Position3, UnitQuaternion};
use crate::metrics::{esa_score, g_factor, MetricsReport, PoseEstimatePair};

pub const SUBMISSION_HEADER: &str = "image_id,qw,qx,qy,qz,tx,ty,tz";

#[derive(Debug, Clone, PartialEq)]
pub struct SubmissionRow {
    pub image_id: String,
    pub pose: Pose,
}

/// `x` rounded to 9 significant digits, without exponent notation.
pub fn format_sig9(x: f64) -> String {
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    // Display never uses exponent notation and prints the shortest round-trip digits
    format!("{}", rounded + 0.0)
}

pub fn write_submission(rows: &[SubmissionRow]) -> String {
    let mut s = format!("{SUBMISSION_HEADER}\n");
    for r in rows {
        let q = r.pose.orientation.to_array();
        let t = r.pose.position.to_array();
        let _ = write!(s, "{}", r.image_id);
        for v in q.iter().chain(&t) {
            let _ = write!(s, ",{}", format_sig9(*v));
        }
        s.push('\n');
    }
    s
}

pub fn parse_submission(text: &str) -> Result<Vec<SubmissionRow>> {
    let bad = |line: usize, msg: String| Error::Malformed {
        what: "submission",
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
    match lines.next() {
        Some((_, SUBMISSION_HEADER)) => {}
        Some((n, l)) => return Err(bad(n, format!("expected header {SUBMISSION_HEADER:?}, got {l:?}"))),
        None => return Err(bad(1, "empty submission".into())),
    }
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(bad(n, format!("expected 8 columns, got {}", cols.len())));
        }
        let mut v = [0.0; 7];
        for (i, c) in cols[1..].iter().enumerate() {
            v[i] = c
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(n, format!("column {}: {e}", i + 2)))?;
            if !v[i].is_finite() {
                return Err(bad(n, format!("column {} is not finite", i + 2)));
            }
        }
        let q = UnitQuaternion::try_new(v[0], v[1], v[2], v[3])
            .ok_or_else(|| bad(n, "zero quaternion".into()))?;
        rows.push(SubmissionRow {
            image_id: cols[0].trim().to_string(),
            pose: Pose::new(q, Position3::new(v[4], v[5], v[6])),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum GFactor {
    Defined(f64),
    /// Both domains present but the synthetic score is zero.
    Undefined,
    /// Fewer than two domains in the manifest.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub overall: MetricsReport,
    pub per_domain: BTreeMap<Domain, MetricsReport>,
    pub g_factor: GFactor,
}

/// Joins predictions with labels on the image id and scores them.
pub fn score_submission(rows: &[SubmissionRow], labels: &[LabelEntry]) -> Result<ScoreReport> {
    let mut preds: HashMap<&str, &Pose> = HashMap::with_capacity(rows.len());
    let known: HashMap<&str, &LabelEntry> = labels.iter().map(|l| (l.filename.as_str(), l)).collect();
    for r in rows {
        if !known.contains_key(r.image_id.as_str()) {
            return Err(Error::UnknownId(r.image_id.clone()));
        }
        preds.insert(r.image_id.as_str(), &r.pose);
    }
    let missing: Vec<String> = labels
        .iter()
        .filter(|l| !preds.contains_key(l.filename.as_str()))
        .map(|l| l.filename.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrediction(missing));
    }
    let mut all = Vec::with_capacity(labels.len());
    let mut by_domain: BTreeMap<Domain, Vec<PoseEstimatePair>> = BTreeMap::new();
    for l in labels {
        let pair = PoseEstimatePair::new(l.filename.clone(), *preds[l.filename.as_str()], label_pose(l)?);
        by_domain.entry(l.domain.unwrap_or_default()).or_default().push(pair.clone());
        all.push(pair);
    }
    let overall = esa_score(&all)?;
    let per_domain = by_domain
        .into_iter()
        .map(|(d, pairs)| Ok((d, esa_score(&pairs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let g = match (per_domain.get(&Domain::Synthetic), per_domain.get(&Domain::PseudoReal)) {
        (Some(syn), Some(real)) => match g_factor(real.esa_score, syn.esa_score) {
            Ok(v) => GFactor::Defined(v),
            Err(_) => GFactor::Undefined,
        },
        _ => GFactor::NotApplicable,
    };
    Ok(ScoreReport {
        overall,
        per_domain,
        g_factor: g,
    })
}
