//! Competition-style pose metrics, the generalization factor and
//! error-vs-distance tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const REPORT_HEADER: &str = "# posekit metrics report v1";
pub const PER_IMAGE_SECTION: &str = "[per_image]";
pub const PER_IMAGE_COLUMNS: &str = "image_id,distance,e_t,e_q,esa";
pub const DISTANCE_COLUMNS: &str =
    "bin_lo,bin_hi,count,e_t_mean,e_t_median,e_t_p90,e_q_mean,e_q_median,e_q_p90";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimatePair {
    pub image_id: String,
    pub predicted: Pose,
    pub ground_truth: Pose,
}

impl PoseEstimatePair {
    pub fn new(image_id: impl Into<String>, predicted: Pose, ground_truth: Pose) -> Self {
        Self {
            image_id: image_id.into(),
            predicted,
            ground_truth,
        }
    }
}

/// Scores of a single image. `e_q` is in degrees, `distance` and `e_t` in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub distance: f64,
    pub e_t: f64,
    pub e_q: f64,
    pub esa: f64,
}

pub fn per_image_scores(pair: &PoseEstimatePair) -> Result<ImageScore> {
    let t = pair.ground_truth.position;
    let distance = t.norm();
    if !(distance > 0.0) {
        return Err(Error::ZeroNormGroundTruth);
    }
    let e_t = pair.predicted.position.distance(t);
    let e_q_rad = pair
        .predicted
        .orientation
        .angular_distance(pair.ground_truth.orientation);
    Ok(ImageScore {
        image_id: pair.image_id.clone(),
        distance,
        e_t,
        e_q: e_q_rad.to_degrees(),
        esa: e_t / distance + e_q_rad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub e_t_mean: f64,
    pub e_q_mean: f64,
    pub esa_score: f64,
    pub n_samples: usize,
    pub per_image: Vec<ImageScore>,
    /// Free-form provenance (model name, head, dataset), serialized as `meta.<key>`.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn esa_score(pairs: &[PoseEstimatePair]) -> Result<MetricsReport> {
    let scores = pairs.iter().map(per_image_scores).collect::<Result<Vec<_>>>()?;
    MetricsReport::from_scores(scores)
}

impl MetricsReport {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageScore) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            e_t_mean: mean(|s| s.e_t),
            e_q_mean: mean(|s| s.e_q),
            esa_score: mean(|s| s.esa),
            n_samples: per_image.len(),
            per_image,
            metadata: BTreeMap::new(),
        })
    }

    /// Report over the union of the per-image rows of `reports`.
    pub fn merge(reports: &[&MetricsReport]) -> Result<Self> {
        let rows = reports.iter().flat_map(|r| r.per_image.iter().cloned()).collect();
        Self::from_scores(rows)
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_HEADER}");
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "e_t_mean={}", self.e_t_mean);
        let _ = writeln!(s, "e_q_mean={}", self.e_q_mean);
        let _ = writeln!(s, "esa_score={}", self.esa_score);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "meta.{k}={v}");
        }
        let _ = writeln!(s, "{PER_IMAGE_SECTION}");
        let _ = writeln!(s, "{PER_IMAGE_COLUMNS}");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{},{},{},{}", r.image_id, r.distance, r.e_t, r.e_q, r.esa);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Malformed {
            what: "metrics report",
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, REPORT_HEADER)) => {}
            Some((n, l)) => return Err(bad(n, format!("expected header, got {l:?}"))),
            None => return Err(Error::EmptyReport("empty file".into())),
        }
        let mut fields: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut in_table = false;
        let mut per_image = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            if !in_table {
                if line == PER_IMAGE_SECTION {
                    in_table = true;
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(n, format!("expected key=value, got {line:?}")))?;
                match k.strip_prefix("meta.") {
                    Some(m) => {
                        metadata.insert(m.to_string(), v.to_string());
                    }
                    None => {
                        fields.insert(k.to_string(), (n, v.to_string()));
                    }
                }
                continue;
            }
            if line == PER_IMAGE_COLUMNS {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad(n, format!("expected 5 columns, got {}", cols.len())));
            }
            let num = |i: usize| {
                cols[i]
                    .parse::<f64>()
                    .map_err(|e| bad(n, format!("column {i}: {e}")))
            };
            per_image.push(ImageScore {
                image_id: cols[0].to_string(),
                distance: num(1)?,
                e_t: num(2)?,
                e_q: num(3)?,
                esa: num(4)?,
            });
        }
        let get = |k: &str| -> Result<f64> {
            let (n, v) = fields
                .get(k)
                .ok_or_else(|| Error::Malformed {
                    what: "metrics report",
                    line: 0,
                    msg: format!("missing key {k}"),
                })?;
            v.parse::<f64>().map_err(|e| bad(*n, format!("{k}: {e}")))
        };
        let n_samples = get("n_samples")? as usize;
        if n_samples == 0 || per_image.is_empty() {
            return Err(Error::EmptyReport("report has no samples".into()));
        }
        if n_samples != per_image.len() {
            return Err(bad(
                0,
                format!("n_samples={n_samples} but {} rows", per_image.len()),
            ));
        }
        Ok(Self {
            e_t_mean: get("e_t_mean")?,
            e_q_mean: get("e_q_mean")?,
            esa_score: get("esa_score")?,
            n_samples,
            per_image,
            metadata,
        })
    }
}

/// `e_real / e_syn`.
pub fn g_factor(e_real: f64, e_syn: f64) -> Result<f64> {
    if !(e_syn > 0.0) {
        return Err(Error::DivisionByZero(e_syn));
    }
    Ok(e_real / e_syn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

impl ErrorStats {
    fn of(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: percentile_sorted(values, 50.0),
            p90: percentile_sorted(values, 90.0),
        })
    }
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One distance bin `[lo, hi)`; stats are `None` for empty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub e_t: Option<ErrorStats>,
    pub e_q: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    pub bins: Vec<DistanceBin>,
}

pub fn error_by_distance(pairs: &[PoseEstimatePair], bin_edges: &[f64]) -> Result<DistanceTable> {
    let scores = pairs.iter().map(per_image_scores).collect::<Result<Vec<_>>>()?;
    error_by_distance_scores(&scores, bin_edges)
}

/// Groups scores into left-closed, right-open distance bins. Scores outside
/// `[edges[0], edges[last])` are dropped.
pub fn error_by_distance_scores(scores: &[ImageScore], bin_edges: &[f64]) -> Result<DistanceTable> {
    if bin_edges.len() < 2 {
        return Err(Error::InvalidBins("need at least two edges".into()));
    }
    if bin_edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidBins("edges must be finite".into()));
    }
    if let Some(w) = bin_edges.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidBins(format!(
            "edges must be strictly increasing, got {} then {}",
            w[0], w[1]
        )));
    }
    let nb = bin_edges.len() - 1;
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); nb];
    for s in scores {
        // index of the last edge <= distance
        let k = bin_edges.partition_point(|e| *e <= s.distance);
        if k == 0 || k > nb {
            continue;
        }
        groups[k - 1].0.push(s.e_t);
        groups[k - 1].1.push(s.e_q);
    }
    let bins = groups
        .into_iter()
        .enumerate()
        .map(|(i, (mut et, mut eq))| DistanceBin {
            lo: bin_edges[i],
            hi: bin_edges[i + 1],
            count: et.len(),
            e_t: ErrorStats::of(&mut et),
            e_q: ErrorStats::of(&mut eq),
        })
        .collect();
    Ok(DistanceTable { bins })
}

impl DistanceTable {
    /// CSV with header [`DISTANCE_COLUMNS`]; empty stats are written as empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{DISTANCE_COLUMNS}\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                b.lo,
                b.hi,
                b.count,
                cell(b.e_t.map(|x| x.mean)),
                cell(b.e_t.map(|x| x.median)),
                cell(b.e_t.map(|x| x.p90)),
                cell(b.e_q.map(|x| x.mean)),
                cell(b.e_q.map(|x| x.median)),
                cell(b.e_q.map(|x| x.p90)),
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Malformed {
            what: "distance table",
            line,
            msg,
        };
        let mut bins = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.is_empty() || line == DISTANCE_COLUMNS {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 9 {
                return Err(bad(n, format!("expected 9 columns, got {}", cols.len())));
            }
            let num = |j: usize| -> Result<Option<f64>> {
                if cols[j].is_empty() {
                    return Ok(None);
                }
                cols[j]
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| bad(n, format!("column {j}: {e}")))
            };
            let stats = |a: usize| -> Result<Option<ErrorStats>> {
                Ok(match (num(a)?, num(a + 1)?, num(a + 2)?) {
                    (Some(mean), Some(median), Some(p90)) => Some(ErrorStats { mean, median, p90 }),
                    _ => None,
                })
            };
            bins.push(DistanceBin {
                lo: num(0)?.ok_or_else(|| bad(n, "missing bin_lo".into()))?,
                hi: num(1)?.ok_or_else(|| bad(n, "missing bin_hi".into()))?,
                count: cols[2].parse().map_err(|e| bad(n, format!("count: {e}")))?,
                e_t: stats(3)?,
                e_q: stats(6)?,
            });
        }
        Ok(Self { bins })
    }
}
