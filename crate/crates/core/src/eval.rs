//! AP@0.5 evaluation, non-maximum suppression, bucketed curves, and report
//! emission.
//!
//! AP is computed in exact rational arithmetic (counts are integers, so every
//! precision/recall value is a ratio) and converted to f64 once at the end.
//! That makes the result reproducible bit-for-bit and directly comparable to
//! a brute-force threshold-enumeration oracle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use crate::environment::WeatherParams;
use crate::error::{Error, Result};
use crate::losses::{iou, BBox, DetectionSet};
use crate::mesh_render::CameraPose;
use crate::pngio;

pub const MATCH_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.5;
pub const CONF_FLOOR: f64 = 0.05;

/// One scored detection after NMS.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Per-sample evaluation record: detections plus metadata for bucketing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub pose: CameraPose,
    pub weather: WeatherParams,
    pub detections: Vec<ScoredBox>,
    pub gt: BBox,
}

/// Greedy NMS at `NMS_IOU` with a `CONF_FLOOR` confidence cutoff; ranking
/// confidence is car class confidence times objectness.
pub fn nms(dets: &DetectionSet) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets.confidence(i) >= CONF_FLOOR)
        .collect();
    order.sort_by(|&a, &b| {
        dets.confidence(b)
            .partial_cmp(&dets.confidence(a))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<ScoredBox> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &dets.boxes[i]) <= NMS_IOU)
        {
            kept.push(ScoredBox {
                bbox: dets.boxes[i],
                confidence: dets.confidence(i),
            });
        }
    }
    kept
}

type Rat = Ratio<BigInt>;

fn rat(n: i64, d: i64) -> Rat {
    Ratio::new(BigInt::from(n), BigInt::from(d))
}

/// All-point interpolated AP at IoU 0.5 over single-vehicle images.
///
/// Detections across all images are ranked by confidence (ties broken by
/// image then detection order), greedily matched one-per-gt, and AP is the
/// area under the monotone precision envelope of the resulting PR curve.
pub fn ap_at_05(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("AP evaluation needs at least one ground truth".into()));
    }
    let n_gt = records.len() as i64;
    let ranked = ranked_detections(records);
    let tp_flags = greedy_match(records, &ranked);
    // cumulative precision at each rank, exact
    let mut precisions: Vec<Rat> = Vec::with_capacity(ranked.len());
    let mut tp_cum = 0i64;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp_cum += 1;
        }
        precisions.push(rat(tp_cum, rank as i64 + 1));
    }
    // monotone envelope from the right; each TP adds 1/n_gt of recall
    let mut ap = Rat::zero();
    let mut env = Rat::zero();
    for i in (0..ranked.len()).rev() {
        if precisions[i] > env {
            env = precisions[i].clone();
        }
        if tp_flags[i] {
            ap += env.clone() / rat(n_gt, 1);
        }
    }
    Ok(ap.to_f64().unwrap())
}

/// (confidence, record index, detection index) sorted by descending
/// confidence with a deterministic tiebreak.
fn ranked_detections(records: &[EvalRecord]) -> Vec<(f64, usize, usize)> {
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        for (di, d) in rec.detections.iter().enumerate() {
            flat.push((d.confidence, ri, di));
        }
    }
    flat.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    flat
}

/// One match per ground truth at IoU >= 0.5, in rank order; duplicates on an
/// already-matched image count as false positives.
fn greedy_match(records: &[EvalRecord], ranked: &[(f64, usize, usize)]) -> Vec<bool> {
    let mut matched = vec![false; records.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for &(_, ri, di) in ranked {
        let rec = &records[ri];
        let is_tp =
            !matched[ri] && iou(&rec.detections[di].bbox, &rec.gt) >= MATCH_IOU;
        if is_tp {
            matched[ri] = true;
        }
        flags.push(is_tp);
    }
    flags
}

/// Bucketing axes over sample metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BucketAxis {
    Elevation,
    Azimuth,
    Distance,
    FogDensity,
    SunAltitude,
}

impl BucketAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elevation" => Ok(BucketAxis::Elevation),
            "azimuth" => Ok(BucketAxis::Azimuth),
            "distance" => Ok(BucketAxis::Distance),
            "fog_density" => Ok(BucketAxis::FogDensity),
            "sun_altitude" => Ok(BucketAxis::SunAltitude),
            other => Err(Error::InvalidInput(format!("unknown bucket axis '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BucketAxis::Elevation => "elevation",
            BucketAxis::Azimuth => "azimuth",
            BucketAxis::Distance => "distance",
            BucketAxis::FogDensity => "fog_density",
            BucketAxis::SunAltitude => "sun_altitude",
        }
    }

    pub fn value(&self, rec: &EvalRecord) -> f64 {
        match self {
            BucketAxis::Elevation => rec.pose.elevation_deg,
            BucketAxis::Azimuth => rec.pose.azimuth_deg,
            BucketAxis::Distance => rec.pose.distance,
            BucketAxis::FogDensity => rec.weather.fog_density,
            BucketAxis::SunAltitude => rec.weather.sun_altitude_deg,
        }
    }

    pub const ALL: [BucketAxis; 5] = [
        BucketAxis::Elevation,
        BucketAxis::Azimuth,
        BucketAxis::Distance,
        BucketAxis::FogDensity,
        BucketAxis::SunAltitude,
    ];
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Bucket {
    pub axis_value: f64,
    pub ap: f64,
    pub count: usize,
}

/// Partitions the records by the exact grid values along `axis` and computes
/// AP per bucket, ordered by axis value.
pub fn bucketed_ap(records: &[EvalRecord], axis: BucketAxis) -> Result<Vec<Bucket>> {
    let mut groups: BTreeMap<i64, Vec<EvalRecord>> = BTreeMap::new();
    for rec in records {
        // grid values are exact config constants; quantize for a stable key
        let key = (axis.value(rec) * 1e6).round() as i64;
        groups.entry(key).or_default().push(rec.clone());
    }
    let mut out = Vec::new();
    for (key, group) in groups {
        out.push(Bucket {
            axis_value: key as f64 / 1e6,
            ap: ap_at_05(&group)?,
            count: group.len(),
        });
    }
    Ok(out)
}

/// Evaluation of one texture across splits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TextureEval {
    pub name: String,
    /// split name -> per-sample records
    pub splits: BTreeMap<String, Vec<EvalRecord>>,
}

impl TextureEval {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes the summary AP table, per-axis curve CSVs, and PNG plots.
/// Deterministic file names and contents.
pub fn emit_report(evals: &[TextureEval], out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if evals.is_empty() {
        return Err(Error::InvalidInput("no evaluations to report".into()));
    }
    // all textures must cover identical sample sets per split
    let reference = &evals[0];
    for other in &evals[1..] {
        if other.splits.keys().collect::<Vec<_>>() != reference.splits.keys().collect::<Vec<_>>() {
            return Err(Error::InvalidInput(format!(
                "texture '{}' evaluated on different splits than '{}'",
                other.name, reference.name
            )));
        }
        for (split, recs) in &reference.splits {
            let ids: Vec<&str> = recs.iter().map(|r| r.sample_id.as_str()).collect();
            let other_ids: Vec<&str> = other.splits[split]
                .iter()
                .map(|r| r.sample_id.as_str())
                .collect();
            if ids != other_ids {
                return Err(Error::InvalidInput(format!(
                    "texture '{}' evaluated on different samples in split '{split}'",
                    other.name
                )));
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    // summary table
    let mut summary = String::from("texture");
    for split in reference.splits.keys() {
        write!(summary, "\t{split}").unwrap();
    }
    summary.push('\n');
    for te in evals {
        summary.push_str(&te.name);
        for recs in te.splits.values() {
            write!(summary, "\t{:.6}", ap_at_05(recs)?).unwrap();
        }
        summary.push('\n');
    }
    let summary_path = out_dir.join("summary.tsv");
    std::fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    written.push(summary_path);

    // per-axis curves and plots
    for split in reference.splits.keys() {
        for axis in BucketAxis::ALL {
            let mut series: Vec<(String, Vec<Bucket>)> = Vec::new();
            for te in evals {
                let buckets = bucketed_ap(&te.splits[split], axis)?;
                let mut csv = String::from("axis_value,ap,count\n");
                for b in &buckets {
                    writeln!(csv, "{},{:.6},{}", b.axis_value, b.ap, b.count).unwrap();
                }
                let csv_path =
                    out_dir.join(format!("curve_{}_{}_{}.csv", te.name, split, axis.name()));
                std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
                written.push(csv_path);
                series.push((te.name.clone(), buckets));
            }
            let plot_path = out_dir.join(format!("plot_{}_{}.png", split, axis.name()));
            plot_series(&plot_path, axis.name(), &series)?;
            written.push(plot_path);
        }
    }
    Ok(written)
}

/// Minimal line chart: AP in [0,1] on y, bucket values on x, one polyline per
/// texture.
fn plot_series(path: &Path, axis_name: &str, series: &[(String, Vec<Bucket>)]) -> Result<()> {
    use ndarray::Array3;
    let (w, h) = (480usize, 320usize);
    let (ml, mr, mt, mb) = (40.0, 10.0, 10.0, 30.0);
    let mut img = Array3::from_elem((h, w, 3), 1.0f64);
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|(_, b)| b.iter().map(|p| p.axis_value))
        .collect();
    if xs.is_empty() {
        return pngio::save_rgb(path, &img);
    }
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if (xmax - xmin).abs() < 1e-12 { 1.0 } else { xmax - xmin };
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = ml + (x - xmin) / span * (w as f64 - ml - mr);
        let py = mt + (1.0 - y) * (h as f64 - mt - mb);
        (px, py)
    };
    let colors = [
        [0.1, 0.4, 0.8],
        [0.85, 0.3, 0.1],
        [0.1, 0.6, 0.2],
        [0.6, 0.2, 0.7],
        [0.3, 0.3, 0.3],
    ];
    let mut draw_px = |x: i64, y: i64, c: [f64; 3]| {
        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
            for ch in 0..3 {
                img[[y as usize, x as usize, ch]] = c[ch];
            }
        }
    };
    // axes
    for x in ml as i64..(w as f64 - mr) as i64 {
        draw_px(x, (h as f64 - mb) as i64, [0.0; 3]);
    }
    for y in mt as i64..(h as f64 - mb) as i64 {
        draw_px(ml as i64, y, [0.0; 3]);
    }
    for (si, (_, buckets)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let pts: Vec<(f64, f64)> = buckets.iter().map(|b| to_px(b.axis_value, b.ap)).collect();
        for pair in pts.windows(2) {
            let (x0, y0) = pair[0];
            let (x1, y1) = pair[1];
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                draw_px(
                    (x0 + (x1 - x0) * t).round() as i64,
                    (y0 + (y1 - y0) * t).round() as i64,
                    color,
                );
            }
        }
        for &(px, py) in &pts {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    draw_px(px as i64 + dx, py as i64 + dy, color);
                }
            }
        }
    }
    let _ = axis_name;
    pngio::save_rgb(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, dets: Vec<(BBox, f64)>, gt: BBox) -> EvalRecord {
        EvalRecord {
            sample_id: id.to_string(),
            pose: CameraPose::new(0.0, 0.0, 5.0),
            weather: WeatherParams::new(30.0, 0.0).unwrap(),
            detections: dets
                .into_iter()
                .map(|(bbox, confidence)| ScoredBox { bbox, confidence })
                .collect(),
            gt,
        }
    }

    #[test]
    fn perfect_detector_ap_one() {
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0);
        let recs: Vec<EvalRecord> = (0..5)
            .map(|i| record(&format!("s{i}"), vec![(gt, 0.9)], gt))
            .collect();
        assert_eq!(ap_at_05(&recs).unwrap(), 1.0);
    }

    #[test]
    fn no_detections_ap_zero() {
        let gt = BBox::new(10.0, 10.0, 20.0, 20.0);
        let recs: Vec<EvalRecord> = (0..5).map(|i| record(&format!("s{i}"), vec![], gt)).collect();
        assert_eq!(ap_at_05(&recs).unwrap(), 0.0);
    }

    #[test]
    fn hand_walked_pr_curve() {
        // 2 images; (conf .9, IoU .6) on img1, (conf .8, IoU .3) on img2
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let good = BBox::new(0.0, 0.0, 10.0, 7.5); // IoU 0.75 >= 0.5
        let bad = BBox::new(0.0, 0.0, 10.0, 4.0); // IoU 0.4 < 0.5
        let recs = vec![
            record("a", vec![(good, 0.9)], gt),
            record("b", vec![(bad, 0.8)], gt),
        ];
        assert_eq!(ap_at_05(&recs).unwrap(), 0.5);
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let recs = vec![record("a", vec![(gt, 0.9), (gt, 0.8)], gt)];
        // first matches, second is FP at full recall; AP stays 1.0
        assert_eq!(ap_at_05(&recs).unwrap(), 1.0);
        // reversed: FP ranked first lowers the envelope
        let near = BBox::new(0.0, 0.0, 10.0, 4.0);
        let recs = vec![record("a", vec![(near, 0.9), (gt, 0.8)], gt)];
        assert_eq!(ap_at_05(&recs).unwrap(), 0.5);
    }

    #[test]
    fn empty_record_set_is_error() {
        assert!(ap_at_05(&[]).is_err());
    }

    #[test]
    fn nms_suppresses_overlaps_and_applies_floor() {
        let mut d = DetectionSet::default();
        d.boxes = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(1.0, 1.0, 11.0, 11.0), // heavy overlap with the first
            BBox::new(30.0, 30.0, 40.0, 40.0),
            BBox::new(50.0, 50.0, 60.0, 60.0), // below floor
        ];
        d.objectness = vec![0.9, 0.8, 0.7, 0.01];
        d.class_conf = vec![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let kept = nms(&d);
        assert_eq!(kept.len(), 2);
        assert!((kept[0].confidence - 0.9).abs() < 1e-12);
        assert!((kept[1].confidence - 0.7).abs() < 1e-12);
    }

    #[test]
    fn buckets_partition_all_samples() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut recs = Vec::new();
        for (i, d) in [5.0, 10.0, 15.0, 20.0, 10.0, 5.0].iter().enumerate() {
            let mut r = record(&format!("s{i}"), vec![(gt, 0.9)], gt);
            r.pose.distance = *d;
            recs.push(r);
        }
        let buckets = bucketed_ap(&recs, BucketAxis::Distance).unwrap();
        assert_eq!(buckets.len(), 4);
        assert_eq!(buckets.iter().map(|b| b.count).sum::<usize>(), recs.len());
        assert_eq!(buckets[0].axis_value, 5.0);
        assert_eq!(buckets[3].axis_value, 20.0);
    }

    #[test]
    fn report_is_deterministic_and_checks_sample_sets() {
        let dir = tempfile::tempdir().unwrap();
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mk = |name: &str, conf: f64| {
            let mut splits = BTreeMap::new();
            splits.insert(
                "seen".to_string(),
                vec![record("s0", vec![(gt, conf)], gt)],
            );
            TextureEval {
                name: name.to_string(),
                splits,
            }
        };
        let evals = vec![mk("benign", 0.9), mk("adversarial", 0.2)];
        let out1 = dir.path().join("r1");
        let out2 = dir.path().join("r2");
        emit_report(&evals, &out1).unwrap();
        emit_report(&evals, &out2).unwrap();
        let s1 = std::fs::read(out1.join("summary.tsv")).unwrap();
        let s2 = std::fs::read(out2.join("summary.tsv")).unwrap();
        assert_eq!(s1, s2);

        // mismatched sample sets
        let mut bad = mk("random", 0.5);
        bad.splits.get_mut("seen").unwrap()[0].sample_id = "other".to_string();
        assert!(emit_report(&[evals[0].clone(), bad], dir.path()).is_err());
    }
}
