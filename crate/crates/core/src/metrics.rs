//! Center-distance average precision and its class/threshold mean.

use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::scene::{distance, Class, Detection, Label};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct MatchConfig {
    /// Center-distance thresholds in world units, ascending.
    pub thresholds: Vec<f32>,
    pub classes: Vec<Class>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { thresholds: alloc::vec![0.5, 1.0, 2.0, 4.0], classes: Class::ALL.to_vec() }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.thresholds.is_empty() {
            return Err(config_err!("match config needs at least one class and one threshold"));
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0)) || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("thresholds must be positive and strictly ascending: {:?}", self.thresholds));
        }
        Ok(())
    }
}

/// Precision/recall after each detection in descending-score order.
pub fn pr_curve(detections: &[Vec<Detection>], labels: &[Vec<Label>], class: Class, threshold: f32) -> (Vec<(f64, f64)>, usize) {
    let total: usize = labels.iter().map(|ls| ls.iter().filter(|l| l.class == class).count()).sum();
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (s, d)))
        .collect();
    // Stable sort keeps sample/detection order among equal scores.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = labels.iter().map(|ls| alloc::vec![false; ls.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(ranked.len());
    for (s, d) in ranked {
        let mut best: Option<(usize, f32)> = None;
        for (j, l) in labels.get(s).map(|v| v.as_slice()).unwrap_or(&[]).iter().enumerate() {
            if l.class != class || used[s][j] {
                continue;
            }
            let dist = distance(l.center, d.center);
            if dist <= threshold && best.is_none_or(|(_, b)| dist < b) {
                best = Some((j, dist));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if total == 0 { 0.0 } else { tp as f64 / total as f64 };
        curve.push((precision, recall));
    }
    (curve, total)
}

/// Area under the precision/recall curve with each precision replaced by the
/// best precision at any equal or higher recall. `None` when the class has no
/// ground truth.
pub fn average_precision(detections: &[Vec<Detection>], labels: &[Vec<Label>], class: Class, threshold: f32) -> Option<f64> {
    let (curve, total) = pr_curve(detections, labels, class, threshold);
    if total == 0 {
        return None;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(_, recall)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * envelope[i];
        prev_recall = recall;
    }
    Some(ap.clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// AP per (class, threshold); `None` where the class has no ground truth.
    pub cells: Vec<(Class, f32, Option<f64>)>,
}

impl MapReport {
    pub fn class_ap(&self, class: Class) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.0 == class).filter_map(|c| c.2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn mean_ap(detections: &[Vec<Detection>], labels: &[Vec<Label>], config: &MatchConfig) -> Result<MapReport> {
    config.validate()?;
    if detections.len() != labels.len() {
        return Err(Error::Metric(alloc::format!("{} detection lists for {} samples", detections.len(), labels.len())));
    }
    let mut cells = Vec::new();
    for &c in &config.classes {
        for &t in &config.thresholds {
            cells.push((c, t, average_precision(detections, labels, c, t)));
        }
    }
    let defined: Vec<f64> = cells.iter().filter_map(|c| c.2).collect();
    if defined.is_empty() {
        return Err(Error::Metric("no class has ground truth; mAP undefined".into()));
    }
    Ok(MapReport { map: defined.iter().sum::<f64>() / defined.len() as f64, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn label(x: f32, class: Class) -> Label {
        Label { center: [x, 0.0], size: [1.0, 1.0], class }
    }

    fn det(x: f32, class: Class, score: f32) -> Detection {
        Detection { center: [x, 0.0], size: [1.0, 1.0], class, score }
    }

    #[test]
    fn perfect_and_empty() {
        let labels = vec![vec![label(0.0, Class::Car), label(10.0, Class::Car)]];
        let dets = vec![vec![det(0.1, Class::Car, 0.9), det(10.0, Class::Car, 0.8)]];
        assert_eq!(average_precision(&dets, &labels, Class::Car, 0.5), Some(1.0));
        assert_eq!(average_precision(&[vec![]], &labels, Class::Car, 0.5), Some(0.0));
        assert_eq!(average_precision(&dets, &labels, Class::Cyclist, 0.5), None);
    }

    #[test]
    fn tp_then_fp_is_one() {
        let labels = vec![vec![label(0.0, Class::Car)]];
        let dets = vec![vec![det(0.0, Class::Car, 0.9), det(5.0, Class::Car, 0.8)]];
        let (curve, _) = pr_curve(&dets, &labels, Class::Car, 1.0);
        assert_eq!(curve, vec![(1.0, 1.0), (0.5, 1.0)]);
        assert_eq!(average_precision(&dets, &labels, Class::Car, 1.0), Some(1.0));
    }

    #[test]
    fn fp_then_tp_is_half() {
        let labels = vec![vec![label(0.0, Class::Car)]];
        let dets = vec![vec![det(5.0, Class::Car, 0.9), det(0.0, Class::Car, 0.8)]];
        assert_eq!(average_precision(&dets, &labels, Class::Car, 1.0), Some(0.5));
    }

    #[test]
    fn map_averages_defined_cells() {
        let labels = vec![vec![label(0.0, Class::Car), label(20.0, Class::Cyclist), label(40.0, Class::Cyclist)]];
        let dets = vec![vec![det(0.0, Class::Car, 0.9), det(30.0, Class::Cyclist, 0.9), det(40.0, Class::Cyclist, 0.8)]];
        let cfg = MatchConfig { thresholds: vec![1.0], classes: vec![Class::Car, Class::Cyclist, Class::Pedestrian] };
        let r = mean_ap(&dets, &labels, &cfg).unwrap();
        assert_eq!(r.class_ap(Class::Cyclist), Some(0.25));
        assert!((r.map - 0.625).abs() < 1e-12);
        assert!(mean_ap(&[vec![]], &[vec![]], &cfg).is_err());
        assert!(MatchConfig { thresholds: vec![2.0, 1.0], ..cfg }.validate().is_err());
    }
}
