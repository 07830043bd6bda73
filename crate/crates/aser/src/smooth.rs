//! Outlier-aware activation smoothing.
//!
//! A handful of input channels in transformer blocks carry activation
//! magnitudes tens of times larger than the rest, and per-token activation
//! quantization spends most of its range on them. Smoothing migrates that
//! magnitude into the weights: each selected channel's activations are
//! divided by a per-channel factor and the matching weight column is
//! multiplied by it, leaving every layer output mathematically unchanged.
//! The scaled-up outlier columns are then split out of the weight so the
//! low-bit grid never sees them; the low-rank compensation path absorbs
//! them instead.

use crate::tensor::{Matrix, TensorError, Vector};
use std::fmt;

#[derive(Debug)]
pub enum SmoothError {
    /// Per-channel mean over zero samples.
    EmptyCalibration { op: &'static str },
    /// Outlier count of zero is never meaningful.
    InvalidOutlierCount,
    /// Selection over a matrix with no channels.
    NoChannels,
    /// Activation and weight channel counts disagree.
    ChannelCount { expected: usize, actual: usize },
    /// A selected channel has zero mean activation magnitude, so its
    /// migration factor is undefined.
    DegenerateChannel { channel: usize },
    /// Stored outlier index outside the channel range.
    OutlierOutOfRange { index: usize, channels: usize },
    /// Stored outlier indices must be strictly ascending.
    UnsortedOutliers,
    /// Stored migration factors must be positive.
    NonPositiveScale { index: usize, value: f64 },
    Tensor(TensorError),
}

impl fmt::Display for SmoothError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SmoothError::EmptyCalibration { op } => {
                write!(f, "{op}: channel mean over zero samples")
            }
            SmoothError::InvalidOutlierCount => {
                write!(f, "outlier count must be at least 1")
            }
            SmoothError::NoChannels => write!(f, "cannot select outliers from zero channels"),
            SmoothError::ChannelCount { expected, actual } => {
                write!(f, "channel count mismatch: activations have {expected}, weights {actual}")
            }
            SmoothError::DegenerateChannel { channel } => write!(
                f,
                "selected channel {channel} has zero mean activation magnitude"
            ),
            SmoothError::OutlierOutOfRange { index, channels } => {
                write!(f, "outlier index {index} out of range for {channels} channels")
            }
            SmoothError::UnsortedOutliers => {
                write!(f, "outlier indices must be strictly ascending")
            }
            SmoothError::NonPositiveScale { index, value } => {
                write!(f, "migration factor at channel {index} must be positive, got {value}")
            }
            SmoothError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

// Display already embeds the full wrapped message; see TensorError.
impl std::error::Error for SmoothError {}

impl From<TensorError> for SmoothError {
    fn from(e: TensorError) -> Self {
        SmoothError::Tensor(e)
    }
}

/// Which dimension of a matrix indexes channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelAxis {
    /// Channels are rows (activations stored channels x tokens).
    Rows,
    /// Channels are columns (weights stored out x in).
    Cols,
}

/// Mean absolute value per channel.
pub fn channel_absmean(m: &Matrix, axis: ChannelAxis) -> Result<Vector, SmoothError> {
    let means = match axis {
        ChannelAxis::Rows => {
            if m.rows() > 0 && m.cols() == 0 {
                return Err(SmoothError::EmptyCalibration { op: "channel_absmean(rows)" });
            }
            (0..m.rows())
                .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>() / m.cols() as f64)
                .collect::<Vec<f64>>()
        }
        ChannelAxis::Cols => {
            if m.cols() > 0 && m.rows() == 0 {
                return Err(SmoothError::EmptyCalibration { op: "channel_absmean(cols)" });
            }
            (0..m.cols())
                .map(|j| {
                    (0..m.rows()).map(|i| m.get(i, j).abs()).sum::<f64>() / m.rows() as f64
                })
                .collect::<Vec<f64>>()
        }
    };
    Ok(Vector::from_vec(means).expect("means of finite values are finite"))
}

/// Picks the `count` channels with the largest activation-times-weight
/// magnitude product. Ties go to the lower channel index; the result is
/// sorted ascending. A `count` larger than the channel count selects every
/// channel.
pub fn select_outliers(
    act_absmean: &Vector,
    weight_absmean: &Vector,
    count: usize,
) -> Result<Vec<usize>, SmoothError> {
    if count == 0 {
        return Err(SmoothError::InvalidOutlierCount);
    }
    let n = act_absmean.len();
    if weight_absmean.len() != n {
        return Err(SmoothError::ChannelCount { expected: n, actual: weight_absmean.len() });
    }
    if n == 0 {
        return Err(SmoothError::NoChannels);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let pa = act_absmean.get(a) * weight_absmean.get(a);
        let pb = act_absmean.get(b) * weight_absmean.get(b);
        pb.partial_cmp(&pa).unwrap().then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order.into_iter().take(count.min(n)).collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Per-channel migration factors plus the channels they apply to.
///
/// `scales` has one entry per input channel: the migration factor for
/// selected outlier channels, exactly 1.0 everywhere else. Applying the
/// plan means multiplying weight columns by `scales` and activation rows
/// by their reciprocals.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPlan {
    scales: Vector,
    outlier_idx: Vec<usize>,
}

impl SmoothingPlan {
    /// A no-op plan: every factor 1.0, no outliers. Dividing activations by
    /// 1.0 is a bitwise no-op, so pipelines can apply a plan
    /// unconditionally.
    pub fn identity(channels: usize) -> SmoothingPlan {
        SmoothingPlan { scales: Vector::ones(channels), outlier_idx: Vec::new() }
    }

    pub fn scales(&self) -> &Vector {
        &self.scales
    }

    pub fn outlier_idx(&self) -> &[usize] {
        &self.outlier_idx
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    /// Rebuilds a plan from stored factors and indices, validating
    /// positivity, ordering, and range.
    pub fn from_parts(scales: Vector, outlier_idx: Vec<usize>) -> Result<SmoothingPlan, SmoothError> {
        if let Some(index) = scales.data().iter().position(|s| *s <= 0.0) {
            return Err(SmoothError::NonPositiveScale { index, value: scales.get(index) });
        }
        for pair in outlier_idx.windows(2) {
            if pair[0] >= pair[1] {
                return Err(SmoothError::UnsortedOutliers);
            }
        }
        if let Some(&index) = outlier_idx.iter().find(|&&i| i >= scales.len()) {
            return Err(SmoothError::OutlierOutOfRange { index, channels: scales.len() });
        }
        Ok(SmoothingPlan { scales, outlier_idx })
    }
}

/// Builds a smoothing plan from a weight matrix (`out x in`) and calibration
/// activations (`in x tokens`).
///
/// The `count` channels with the largest product of mean activation
/// magnitude and mean weight magnitude are selected; each gets the factor
/// `act_absmean / min_selected_act_absmean`, so the weakest selected
/// channel's factor is exactly 1.0 and every factor is at least 1.0.
pub fn build_plan(w: &Matrix, x: &Matrix, count: usize) -> Result<SmoothingPlan, SmoothError> {
    if w.cols() != x.rows() {
        return Err(SmoothError::ChannelCount { expected: x.rows(), actual: w.cols() });
    }
    let act = channel_absmean(x, ChannelAxis::Rows)?;
    let weight = channel_absmean(w, ChannelAxis::Cols)?;
    let outlier_idx = select_outliers(&act, &weight, count)?;
    let mut floor = f64::INFINITY;
    let mut weakest = 0usize;
    for &i in &outlier_idx {
        if act.get(i) < floor {
            floor = act.get(i);
            weakest = i;
        }
    }
    if floor == 0.0 {
        return Err(SmoothError::DegenerateChannel { channel: weakest });
    }
    let mut scales = vec![1.0f64; w.cols()];
    for &i in &outlier_idx {
        scales[i] = act.get(i) / floor;
    }
    Ok(SmoothingPlan {
        scales: Vector::from_vec(scales).expect("ratios of positive finite values"),
        outlier_idx,
    })
}

/// The migrated weight matrix, partitioned by channel.
#[derive(Debug, Clone)]
pub struct WeightSplit {
    /// Migrated weight with outlier columns zeroed; this part goes through
    /// the integer grid.
    pub kept: Matrix,
    /// Only the outlier columns of the migrated weight; this part bypasses
    /// the grid and is folded into the low-rank compensation target.
    pub outlier: Matrix,
}

/// Applies the plan's factors to the weight columns and splits the result
/// by copying: every element of the migrated weight lands bit-identically
/// in exactly one of the two parts, the other holding zero.
pub fn split_weight(w: &Matrix, plan: &SmoothingPlan) -> Result<WeightSplit, SmoothError> {
    if w.cols() != plan.channels() {
        return Err(SmoothError::ChannelCount { expected: plan.channels(), actual: w.cols() });
    }
    let migrated = w.scale_cols(plan.scales())?;
    let mut is_outlier = vec![false; w.cols()];
    for &i in &plan.outlier_idx {
        if i >= w.cols() {
            return Err(SmoothError::OutlierOutOfRange { index: i, channels: w.cols() });
        }
        is_outlier[i] = true;
    }
    let mut kept = Vec::with_capacity(migrated.data().len());
    let mut outlier = Vec::with_capacity(migrated.data().len());
    for i in 0..migrated.rows() {
        for (j, &v) in migrated.row(i).iter().enumerate() {
            if is_outlier[j] {
                kept.push(0.0);
                outlier.push(v);
            } else {
                kept.push(v);
                outlier.push(0.0);
            }
        }
    }
    Ok(WeightSplit {
        kept: Matrix::from_vec(w.rows(), w.cols(), kept)?,
        outlier: Matrix::from_vec(w.rows(), w.cols(), outlier)?,
    })
}
