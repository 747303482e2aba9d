//! Shared helpers for integration tests.
//!
//! The centerpiece is a brute-force AP@0.5 oracle that shares no code with
//! `uvcamo::eval::ap_at_05`: it enumerates recall levels and scans every
//! ranked prefix for the best precision, all in exact rational arithmetic.

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};

use uvcamo::eval::EvalRecord;
use uvcamo::losses::iou;

type Rat = Ratio<BigInt>;

fn rat(n: i64, d: i64) -> Rat {
    Ratio::new(BigInt::from(n), BigInt::from(d))
}

/// Brute-force all-point-interpolated AP@0.5.
///
/// Matching semantics are the contract both implementations must satisfy:
/// detections ranked by descending confidence with (record, detection) order
/// as the tiebreak, greedily matched at most once per ground truth at
/// IoU >= 0.5. From the resulting hit sequence this oracle computes, for
/// every achieved recall level k/n_gt, the maximum precision over all ranked
/// prefixes reaching that recall, and sums those maxima. That is the
/// threshold-enumeration view of the same integral `ap_at_05` computes with
/// its right-to-left envelope walk.
pub fn brute_force_ap(records: &[EvalRecord]) -> f64 {
    let n_gt = records.len() as i64;
    assert!(n_gt > 0, "oracle needs at least one ground truth");
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        for (di, det) in rec.detections.iter().enumerate() {
            ranked.push((det.confidence, ri, di));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut gt_taken = vec![false; records.len()];
    let mut hits: Vec<bool> = Vec::with_capacity(ranked.len());
    for &(_, ri, di) in &ranked {
        let rec = &records[ri];
        let good = !gt_taken[ri] && iou(&rec.detections[di].bbox, &rec.gt) >= 0.5;
        if good {
            gt_taken[ri] = true;
        }
        hits.push(good);
    }
    // precision of every prefix, and the cumulative TP count it reaches
    let mut prefix: Vec<(i64, Rat)> = Vec::with_capacity(hits.len());
    let mut tp = 0i64;
    for (idx, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        prefix.push((tp, rat(tp, idx as i64 + 1)));
    }
    let total_tp = tp;
    let mut ap = Rat::zero();
    for k in 1..=total_tp {
        // best precision among prefixes that already contain k true positives
        let mut best = Rat::zero();
        for (tp_at, prec) in &prefix {
            if *tp_at >= k && *prec > best {
                best = prec.clone();
            }
        }
        ap += best / rat(n_gt, 1);
    }
    ap.to_f64().unwrap()
}
