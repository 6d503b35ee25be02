//! Calibration and analysis metrics over scored responses:
//! relevance-weighted correctness, expected calibration error at fact and
//! response granularity, reliability-histogram data, per-response confidence
//! distribution statistics, and error-detection quality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::ResponseRecord;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bin count must be at least 1")]
    ZeroBins,
    #[error("no scored responses: every response was degenerate or missing scores")]
    NoScoredResponses,
    #[error("detection inputs are misaligned: {predictions} predictions vs {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("detection metrics need at least one (prediction, label) pair")]
    EmptyDetectionInput,
}

/// Equal-width binning of the unit interval.
///
/// Bins are right-closed except the first, which also includes 0.0: with ten
/// bins they are [0, 0.1], (0.1, 0.2], …, (0.9, 1.0], so the boundary value
/// 1.0 falls in the last bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    bin_count: usize,
}

impl BinningConfig {
    pub fn new(bin_count: usize) -> Result<Self, MetricsError> {
        if bin_count == 0 {
            return Err(MetricsError::ZeroBins);
        }
        Ok(Self { bin_count })
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    /// Bin index for a unit-interval value.
    pub fn bin_index(&self, value: f64) -> usize {
        let scaled = (value * self.bin_count as f64).ceil() as isize - 1;
        scaled.clamp(0, self.bin_count as isize - 1) as usize
    }

    /// (lower, upper) bounds of one bin.
    pub fn bin_range(&self, index: usize) -> (f64, f64) {
        let width = 1.0 / self.bin_count as f64;
        (index as f64 * width, (index + 1) as f64 * width)
    }
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self { bin_count: 10 }
    }
}

/// Per-response aggregate of fact scores: the mean confidence and the mean of
/// correctness × relevance over all fully scored facts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseAggregate {
    pub confidence: f64,
    pub correctness: f64,
    pub scored_facts: usize,
}

/// Aggregates one response's fact scores. Facts missing any of confidence,
/// correctness, or relevance are skipped; a response with no fully scored
/// facts is degenerate and yields `None`.
pub fn weighted_correctness(response: &ResponseRecord) -> Option<ResponseAggregate> {
    let scored: Vec<(f64, f64)> = response
        .facts
        .iter()
        .filter_map(|fact| {
            let confidence = fact.confidence?.value();
            let correctness = fact.correctness?.value();
            let relevance = fact.relevance?.value();
            Some((confidence, correctness * relevance))
        })
        .collect();
    if scored.is_empty() {
        return None;
    }
    let count = scored.len() as f64;
    Some(ResponseAggregate {
        confidence: scored.iter().map(|(conf, _)| conf).sum::<f64>() / count,
        correctness: scored.iter().map(|(_, corr)| corr).sum::<f64>() / count,
        scored_facts: scored.len(),
    })
}

/// One calibration bin: its confidence range, how many responses landed in
/// it, and their mean confidence and correctness (`None` when empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub mean_correctness: Option<f64>,
}

/// Binned reliability data plus the scalar expected calibration error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub mean_confidence: f64,
    pub ece: f64,
    pub included_responses: usize,
    pub excluded_responses: usize,
    pub bins: Vec<BinStat>,
}

fn calibration_from_pairs(
    pairs: &[(f64, f64)],
    excluded: usize,
    binning: &BinningConfig,
) -> Result<CalibrationResult, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoScoredResponses);
    }
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); binning.bin_count()];
    for &(confidence, correctness) in pairs {
        let slot = &mut sums[binning.bin_index(confidence)];
        slot.0 += 1;
        slot.1 += confidence;
        slot.2 += correctness;
    }
    let total = pairs.len() as f64;
    let mut ece = 0.0;
    let bins = sums
        .iter()
        .enumerate()
        .map(|(index, &(count, conf_sum, corr_sum))| {
            let (lower, upper) = binning.bin_range(index);
            let (mean_confidence, mean_correctness) = if count == 0 {
                (None, None)
            } else {
                let mean_conf = conf_sum / count as f64;
                let mean_corr = corr_sum / count as f64;
                ece += (count as f64 / total) * (mean_corr - mean_conf).abs();
                (Some(mean_conf), Some(mean_corr))
            };
            BinStat { lower, upper, count, mean_confidence, mean_correctness }
        })
        .collect();
    Ok(CalibrationResult {
        mean_confidence: pairs.iter().map(|(conf, _)| conf).sum::<f64>() / total,
        ece,
        included_responses: pairs.len(),
        excluded_responses: excluded,
        bins,
    })
}

/// Fact-level expected calibration error: responses are reduced to
/// (mean confidence, relevance-weighted correctness) pairs via
/// [`weighted_correctness`], binned by confidence, and the count-weighted
/// mean |correctness − confidence| gap is summed over bins. Degenerate
/// responses are excluded and counted; an input with no scored responses is
/// an error.
pub fn f_ece(
    responses: &[ResponseRecord],
    binning: &BinningConfig,
) -> Result<CalibrationResult, MetricsError> {
    let mut pairs = Vec::with_capacity(responses.len());
    let mut excluded = 0usize;
    for response in responses {
        match weighted_correctness(response) {
            Some(aggregate) => pairs.push((aggregate.confidence, aggregate.correctness)),
            None => excluded += 1,
        }
    }
    calibration_from_pairs(&pairs, excluded, binning)
}

/// Response-level expected calibration error baseline: the confidence side is
/// the verbalized whole-response score and the correctness side is the same
/// relevance-weighted fact mean used by [`f_ece`]. Responses missing either
/// side are excluded and counted.
pub fn response_ece(
    responses: &[ResponseRecord],
    binning: &BinningConfig,
) -> Result<CalibrationResult, MetricsError> {
    let mut pairs = Vec::with_capacity(responses.len());
    let mut excluded = 0usize;
    for response in responses {
        match (response.response_confidence, weighted_correctness(response)) {
            (Some(confidence), Some(aggregate)) => {
                pairs.push((confidence.value(), aggregate.correctness));
            }
            _ => excluded += 1,
        }
    }
    calibration_from_pairs(&pairs, excluded, binning)
}

/// One populated reliability-histogram point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPoint {
    pub midpoint: f64,
    pub mean_confidence: f64,
    pub mean_correctness: f64,
    pub count: usize,
}

/// Plot-ready reliability data: populated bins as points, every bin (empty
/// ones included, count 0) for tabular emission, and the y = x reference
/// segment an ideally calibrated model would trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityHistogram {
    pub points: Vec<ReliabilityPoint>,
    pub bins: Vec<BinStat>,
    pub diagonal: [(f64, f64); 2],
}

pub fn reliability_histogram(result: &CalibrationResult) -> ReliabilityHistogram {
    let points = result
        .bins
        .iter()
        .filter_map(|bin| {
            Some(ReliabilityPoint {
                midpoint: (bin.lower + bin.upper) / 2.0,
                mean_confidence: bin.mean_confidence?,
                mean_correctness: bin.mean_correctness?,
                count: bin.count,
            })
        })
        .collect();
    ReliabilityHistogram {
        points,
        bins: result.bins.clone(),
        diagonal: [(0.0, 0.0), (1.0, 1.0)],
    }
}

/// Summary statistics of one response's fact-confidence vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    pub query_id: String,
    pub fact_count: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Population variance of the confidence vector.
    pub variance: f64,
    /// Indices of facts whose confidence falls more than 1.5×IQR below the
    /// lower quartile — unusually uncertain facts within the response.
    pub outlier_indices: Vec<usize>,
    pub response_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DistributionStats {
    pub per_response: Vec<ResponseDistribution>,
    /// Responses skipped because no fact carried a confidence score.
    pub skipped_responses: usize,
}

/// Per-response mean/max/min/variance of fact confidence, with low outliers
/// flagged by the 1.5×IQR rule (below the lower quartile only). Responses
/// with no scored facts are skipped and counted.
pub fn distribution_stats(responses: &[ResponseRecord]) -> DistributionStats {
    let mut per_response = Vec::with_capacity(responses.len());
    let mut skipped = 0usize;
    for response in responses {
        let scored: Vec<(usize, f64)> = response
            .facts
            .iter()
            .filter_map(|fact| Some((fact.index, fact.confidence?.value())))
            .collect();
        if scored.is_empty() {
            skipped += 1;
            continue;
        }
        let values: Vec<f64> = scored.iter().map(|&(_, value)| value).collect();
        let count = values.len() as f64;
        let mean = values.iter().sum::<f64>() / count;
        let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
        let (q1, q3) = quartiles(&values);
        let low_fence = q1 - 1.5 * (q3 - q1);
        per_response.push(ResponseDistribution {
            query_id: response.query_id.clone(),
            fact_count: values.len(),
            mean,
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            variance,
            outlier_indices: scored
                .iter()
                .filter(|&&(_, value)| value < low_fence)
                .map(|&(index, _)| index)
                .collect(),
            response_confidence: response.response_confidence.map(|score| score.value()),
        });
    }
    DistributionStats { per_response, skipped_responses: skipped }
}

/// Lower and upper quartiles by linear interpolation between order
/// statistics (the common "type 7" estimator).
fn quartiles(values: &[f64]) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite confidence scores"));
    let at = |p: f64| -> f64 {
        let position = p * (sorted.len() - 1) as f64;
        let below = position.floor() as usize;
        let fraction = position - below as f64;
        if fraction == 0.0 || below + 1 == sorted.len() {
            sorted[below]
        } else {
            sorted[below] + fraction * (sorted[below + 1] - sorted[below])
        }
    };
    (at(0.25), at(0.75))
}

/// Confusion counts with "erroneous fact" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
}

/// Error-detection quality. Precision and recall are `None` when their
/// denominator is zero — undefined, never reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub confusion: Confusion,
}

/// Confusion-matrix metrics for error detection: `flagged` is the per-fact
/// prediction (fact suspected erroneous), `erroneous` the per-fact label.
pub fn detection_metrics(
    flagged: &[bool],
    erroneous: &[bool],
) -> Result<DetectionReport, MetricsError> {
    if flagged.len() != erroneous.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: flagged.len(),
            labels: erroneous.len(),
        });
    }
    if flagged.is_empty() {
        return Err(MetricsError::EmptyDetectionInput);
    }
    let mut confusion = Confusion { tp: 0, fp: 0, tn: 0, false_negatives: 0 };
    for (&predicted, &actual) in flagged.iter().zip(erroneous) {
        match (predicted, actual) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
            (false, true) => confusion.false_negatives += 1,
        }
    }
    let ratio = |numerator: usize, denominator: usize| {
        (denominator > 0).then(|| numerator as f64 / denominator as f64)
    };
    Ok(DetectionReport {
        accuracy: (confusion.tp + confusion.tn) as f64 / flagged.len() as f64,
        precision: ratio(confusion.tp, confusion.tp + confusion.fp),
        recall: ratio(confusion.tp, confusion.tp + confusion.false_negatives),
        confusion,
    })
}
