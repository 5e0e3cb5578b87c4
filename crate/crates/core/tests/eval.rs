use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toothloc::data::ToothAnnotation;
use toothloc::eval::*;
use toothloc::geometry::{iou, BBox, ToothId, TEETH};

fn grid_box(rng: &mut impl Rng) -> BBox {
    let x0 = rng.random_range(0..6) as f64;
    let y0 = rng.random_range(0..6) as f64;
    let w = rng.random_range(1..4) as f64;
    let h = rng.random_range(1..4) as f64;
    BBox::from_corners(x0, y0, x0 + w, y0 + h)
}

fn random_boxes(rng: &mut impl Rng, max: usize) -> Vec<BBox> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| grid_box(rng)).collect()
}

/// Full IoU table, then two explicit argmax passes.
fn oracle_match(dets: &[BBox], gts: &[BBox]) -> Vec<(usize, usize, f64)> {
    let table: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| iou(d, g)).collect()).collect();
    let mut assigned = vec![None; dets.len()];
    for d in 0..dets.len() {
        let mut best = 0.0;
        for g in 0..gts.len() {
            if table[d][g] > best {
                best = table[d][g];
                assigned[d] = Some(g);
            }
        }
    }
    let mut pairs = Vec::new();
    for g in 0..gts.len() {
        let mut keep: Option<usize> = None;
        for d in 0..dets.len() {
            if assigned[d] == Some(g) && keep.is_none_or(|k| table[d][g] > table[k][g]) {
                keep = Some(d);
            }
        }
        if let Some(d) = keep {
            pairs.push((g, d, table[d][g]));
        }
    }
    pairs
}

fn oracle_sweep(scenes: &[(Vec<BBox>, Vec<BBox>)]) -> (f64, f64, f64, Vec<(f64, f64)>) {
    let nd: usize = scenes.iter().map(|s| s.0.len()).sum();
    let ng: usize = scenes.iter().map(|s| s.1.len()).sum();
    let mut pr = Vec::new();
    for i in 0..21 {
        let mut tp = 0;
        for (d, g) in scenes {
            tp += oracle_match(d, g).iter().filter(|p| p.2 >= i as f64 / 20.0).count();
        }
        let p = if nd == 0 { 1.0 } else { tp as f64 / nd as f64 };
        let r = if ng == 0 { 1.0 } else { tp as f64 / ng as f64 };
        pr.push((p, r));
    }
    let f1 = |(p, r): (f64, f64)| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let mut pts: Vec<(f64, f64)> = pr.iter().map(|&(p, r)| (r, p)).collect();
    pts.reverse();
    pts.insert(0, (0.0, pts[0].1));
    let mut area = 0.0;
    for k in 1..pts.len() {
        area += (pts[k].0 - pts[k - 1].0) * (pts[k].1 + pts[k - 1].1) / 2.0;
    }
    (area, f1(pr[10]), f1(pr[15]), pr)
}

#[test]
fn identity_matches_everything() {
    let b = vec![BBox::new(10.0, 10.0, 4.0, 6.0), BBox::new(30.0, 10.0, 5.0, 5.0)];
    let m = match_boxes(&b, &b);
    assert_eq!(m.pairs.len(), 2);
    assert!(m.pairs.iter().all(|p| p.iou == 1.0 && p.gt == p.det));
    assert!(m.unmatched_gt.is_empty() && m.unmatched_det.is_empty());
}

#[test]
fn detection_straddling_two_boxes_takes_the_larger_overlap() {
    let gt = vec![BBox::from_corners(0.0, 0.0, 4.0, 4.0), BBox::from_corners(4.0, 0.0, 8.0, 4.0)];
    // 1 unit over the first box, 3 over the second
    let det = vec![BBox::from_corners(3.0, 0.0, 7.0, 4.0)];
    let m = match_boxes(&det, &gt);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!(m.pairs[0].gt, 1);
    assert!((m.pairs[0].iou - 12.0 / 20.0).abs() < 1e-12);
    assert_eq!(m.unmatched_gt, vec![0]);
}

#[test]
fn disjoint_detection_is_unmatched() {
    let m = match_boxes(&[BBox::new(100.0, 100.0, 2.0, 2.0)], &[BBox::new(0.0, 0.0, 2.0, 2.0)]);
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched_det, vec![0]);
    assert_eq!(m.unmatched_gt, vec![0]);
}

#[test]
fn ties_go_to_lower_indices() {
    let gt = vec![BBox::from_corners(0.0, 0.0, 2.0, 2.0), BBox::from_corners(2.0, 0.0, 4.0, 2.0)];
    let det = vec![BBox::from_corners(1.0, 0.0, 3.0, 2.0), BBox::from_corners(1.0, 0.0, 3.0, 2.0)];
    let m = match_boxes(&det, &gt);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!((m.pairs[0].gt, m.pairs[0].det), (0, 0));
    assert_eq!(m.unmatched_det, vec![1]);
}

fn pairs_at(ious: &[f64], dets: usize, gts: usize) -> MatchResult {
    let pairs: Vec<Pair> = ious.iter().enumerate().map(|(i, &v)| Pair { gt: i, det: i, iou: v }).collect();
    MatchResult {
        unmatched_gt: (ious.len()..gts).collect(),
        unmatched_det: (ious.len()..dets).collect(),
        pairs,
    }
}

#[test]
fn precision_recall_ratios() {
    let pr = precision_recall_at(&pairs_at(&[1.0, 1.0], 2, 2), 0.5);
    assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    let pr = precision_recall_at(&pairs_at(&[0.9, 0.7, 0.2], 3, 4), 0.5);
    assert!((pr.precision - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(pr.recall, 0.5);
    assert_eq!((pr.tp, pr.fp, pr.fn_), (2, 1, 2));
    let pr = precision_recall_at(&pairs_at(&[0.99, 0.5], 2, 2), 1.0);
    assert_eq!(pr.tp, 0);
}

#[test]
fn empty_denominators_are_flagged() {
    let pr = precision_recall_at(&MatchResult::default(), 0.5);
    assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
    assert!(pr.empty_denominator);
    assert!(!precision_recall_at(&pairs_at(&[0.6], 1, 1), 0.5).empty_denominator);
}

#[test]
fn perfect_and_empty_detectors() {
    let b: Vec<BBox> = (0..TEETH).map(|i| BBox::new(10.0 * i as f64, 5.0, 4.0, 4.0)).collect();
    let perfect = average_precision(&[match_boxes(&b, &b)]);
    assert!((perfect.ap - 1.0).abs() < 1e-12);
    assert_eq!((perfect.ap50, perfect.ap75), (1.0, 1.0));
    let empty = average_precision(&[match_boxes(&[], &b)]);
    assert_eq!(empty.ap50, 0.0);
    assert_eq!(empty.ap, 0.0);
    assert!(empty.empty_denominator);
}

#[test]
fn curve_covers_the_grid() {
    let ap = average_precision(&[pairs_at(&[0.42], 1, 1)]);
    assert_eq!(ap.curve.len(), 21);
    for (i, p) in ap.curve.iter().enumerate() {
        assert!((p.threshold - 0.05 * i as f64).abs() < 1e-12);
    }
    assert_eq!(ap.curve[8].recall, 1.0);
    assert_eq!(ap.curve[9].recall, 0.0);
}

#[test]
fn mean_iou_of_pairs() {
    assert!((mean_iou(&[pairs_at(&[0.8], 1, 1), pairs_at(&[0.6], 1, 1)]).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(mean_iou(&[pairs_at(&[1.0, 1.0], 2, 2)]), Some(1.0));
    assert_eq!(mean_iou(&[MatchResult::default()]), None);
}

#[test]
fn random_fixtures_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let scenes: Vec<(Vec<BBox>, Vec<BBox>)> =
            (0..rng.random_range(1..4)).map(|_| (random_boxes(&mut rng, 6), random_boxes(&mut rng, 6))).collect();
        let matches: Vec<MatchResult> = scenes.iter().map(|(d, g)| match_boxes(d, g)).collect();
        let mut iou_sum = 0.0;
        let mut n = 0;
        for ((d, g), m) in scenes.iter().zip(&matches) {
            let want = oracle_match(d, g);
            let got: Vec<(usize, usize, f64)> = m.pairs.iter().map(|p| (p.gt, p.det, p.iou)).collect();
            assert_eq!(got, want);
            assert_eq!(m.pairs.len() + m.unmatched_det.len(), d.len());
            assert_eq!(m.pairs.len() + m.unmatched_gt.len(), g.len());
            iou_sum += want.iter().map(|p| p.2).sum::<f64>();
            n += want.len();
        }
        let (area, ap50, ap75, pr) = oracle_sweep(&scenes);
        let got = average_precision(&matches);
        assert!((got.ap - area).abs() < 1e-9, "{} vs {}", got.ap, area);
        assert!((got.ap50 - ap50).abs() < 1e-9);
        assert!((got.ap75 - ap75).abs() < 1e-9);
        for (c, (p, r)) in got.curve.iter().zip(pr) {
            assert!((c.precision - p).abs() < 1e-12 && (c.recall - r).abs() < 1e-12);
        }
        match mean_iou(&matches) {
            Some(v) => assert!((v - iou_sum / n as f64).abs() < 1e-12),
            None => assert_eq!(n, 0),
        }
    }
}

fn row_of_teeth() -> Vec<ToothAnnotation> {
    ToothId::all()
        .map(|t| ToothAnnotation { tooth: t, present: true, bbox: BBox::new(20.0 * t.flat() as f64, 50.0, 10.0, 20.0) })
        .collect()
}

fn perfect_scene(truth: &[ToothAnnotation]) -> EvalScene {
    EvalScene {
        detections: truth.iter().map(|t| Detection { tooth: t.tooth, bbox: t.bbox }).collect(),
        truth: truth.to_vec(),
    }
}

#[test]
fn perfect_identification() {
    let s = perfect_scene(&row_of_teeth());
    let id = identification_metrics(std::slice::from_ref(&s));
    assert_eq!((id.precision, id.recall), (1.0, 1.0));
    assert_eq!((id.n_gtb, id.n_db, id.n_tpn), (32, 32, 32));
    let c = confusion_matrix(&[s]);
    for (r, row) in c.counts.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            assert_eq!(v, u64::from(r == k));
        }
    }
}

#[test]
fn swapped_ids_drop_two_true_positives() {
    let truth = row_of_teeth();
    let mut s = perfect_scene(&truth);
    s.truth[31].present = false;
    s.truth[30].present = false;
    let (a, b) = (3, 4);
    let ta = s.detections[a].tooth;
    s.detections[a].tooth = s.detections[b].tooth;
    s.detections[b].tooth = ta;
    let id = identification_metrics(std::slice::from_ref(&s));
    assert_eq!((id.n_gtb, id.n_db, id.n_tpn), (30, 30, 28));
    assert!((id.precision - 28.0 / 30.0).abs() < 1e-15);
    let c = confusion_matrix(&[s]);
    let off: u64 = (0..TEETH).flat_map(|r| (0..TEETH).map(move |k| (r, k))).filter(|(r, k)| r != k).map(|(r, k)| c.counts[r][k]).sum();
    assert_eq!(off, 2);
    let ia = ta.index() as usize - 1;
    let ib = truth[b].tooth.index() as usize - 1;
    assert_eq!((c.counts[ia][ib], c.counts[ib][ia]), (1, 1));
}

#[test]
fn identification_ratio_example() {
    let truth = row_of_teeth();
    let mut s = perfect_scene(&truth);
    // 29 present; two of them detected badly, one detection on a missing tooth
    for t in &mut s.truth[29..] {
        t.present = false;
    }
    s.detections[0].bbox = BBox::new(1000.0, 1000.0, 1.0, 1.0);
    s.detections[1].bbox = BBox::new(1000.0, 2000.0, 1.0, 1.0);
    s.detections[2].tooth = s.detections[5].tooth;
    s.detections[3].tooth = s.detections[6].tooth;
    let id = identification_metrics(&[s]);
    assert_eq!((id.n_gtb, id.n_db, id.n_tpn), (29, 27, 25));
    assert!((id.precision - 25.0 / 27.0).abs() < 1e-15);
    assert!((id.recall - 25.0 / 29.0).abs() < 1e-15);
}

#[test]
fn confusion_rows_sum_to_matched_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = row_of_teeth();
    let scenes: Vec<EvalScene> = (0..10)
        .map(|_| {
            let mut s = perfect_scene(&truth);
            for t in &mut s.truth {
                t.present = rng.random_bool(0.8);
            }
            for d in &mut s.detections {
                d.bbox.cx += rng.random_range(-6.0..6.0);
                d.tooth = ToothId::from_flat(rng.random_range(0..TEETH));
            }
            s
        })
        .collect();
    let c = confusion_matrix(&scenes);
    let id = identification_metrics(&scenes);
    assert_eq!(c.total(), id.n_db as u64);
    let diag: u64 = (0..TEETH).map(|k| c.counts[k][k]).sum();
    assert_eq!(diag, id.n_tpn as u64);
    for (row, norm) in c.counts.iter().zip(c.normalized()) {
        let s: f64 = norm.iter().sum();
        assert!(row.iter().sum::<u64>() == 0 || (s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn report_serialises_undefined_miou() {
    let truth = row_of_teeth();
    let s = EvalScene { detections: Vec::new(), truth };
    let r = evaluate(&[s]);
    assert_eq!(r.detection.miou, None);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert!(json["detection"]["miou"].is_null());
    assert_eq!(json["identification"]["n_gtb"], 32);
    assert!(r.to_csv().contains("miou,undefined\n"));
}

#[test]
fn renders_have_expected_size() {
    let s = perfect_scene(&row_of_teeth());
    let r = evaluate(std::slice::from_ref(&s));
    let img = render_confusion(&r.confusion);
    assert_eq!(img.dimensions(), (24 + 32 * 12, 24 + 32 * 12));
    let canvas = image::GrayImage::new(768, 512);
    let ious = s.detection_ious();
    let over = render_overlay(&canvas, &s.detections, Some(&ious));
    assert_eq!(over.dimensions(), (768, 512));
    assert!(over.pixels().any(|p| p[1] > 200 && p[0] < 100));
}

proptest! {
    #[test]
    fn true_positives_fall_with_threshold(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = match_boxes(&random_boxes(&mut rng, 8), &random_boxes(&mut rng, 8));
        let tps: Vec<usize> = (0..21).map(|i| precision_recall_at(&m, threshold(i)).tp).collect();
        prop_assert!(tps.windows(2).all(|w| w[1] <= w[0]));
        for p in &m.pairs {
            prop_assert!(p.iou > 0.0);
        }
        let mut gts: Vec<usize> = m.pairs.iter().map(|p| p.gt).collect();
        let mut dets: Vec<usize> = m.pairs.iter().map(|p| p.det).collect();
        gts.sort_unstable();
        dets.sort_unstable();
        gts.dedup();
        dets.dedup();
        prop_assert_eq!(gts.len(), m.pairs.len());
        prop_assert_eq!(dets.len(), m.pairs.len());
    }

    #[test]
    fn report_values_in_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = row_of_teeth();
        let scenes: Vec<EvalScene> = (0..3).map(|_| {
            let mut s = perfect_scene(&truth);
            for t in &mut s.truth { t.present = rng.random_bool(0.7); }
            for d in &mut s.detections {
                d.bbox.cx += rng.random_range(-12.0..12.0);
                d.bbox.w *= rng.random_range(0.5..1.5);
                if rng.random_bool(0.2) { d.tooth = ToothId::from_flat(rng.random_range(0..TEETH)); }
            }
            s
        }).collect();
        let r = evaluate(&scenes);
        let id = r.identification.metrics;
        for v in [r.detection.ap, r.detection.ap50, r.detection.ap75, id.precision, id.recall, r.detection.miou.unwrap_or(0.0)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(id.n_tpn <= id.n_db.min(id.n_gtb));
    }
}
