use fpt_core::metrics::*;
use fpt_core::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random instance with both classes; scores on a coarse grid so ties are
/// common.
fn instance(rng: &mut ChaCha8Rng) -> Vec<ScoredSample> {
    let n = rng.gen_range(2..=200);
    let levels = rng.gen_range(2..=40);
    let mut v: Vec<ScoredSample> = (0..n)
        .map(|_| {
            ScoredSample::new(
                rng.gen_range(0..levels) as f64 / (levels - 1) as f64,
                rng.gen_range(0..=1),
            )
        })
        .collect();
    v[0].label = 0;
    v[1].label = 1;
    v
}

fn brute_auroc(s: &[ScoredSample]) -> f64 {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for p in s.iter().filter(|x| x.label == 1) {
        for n in s.iter().filter(|x| x.label == 0) {
            pairs += 1;
            twice += if p.score > n.score {
                2
            } else if p.score == n.score {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn brute_ap(s: &[ScoredSample]) -> f64 {
    let pos = s.iter().filter(|x| x.label == 1).count() as u64;
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0u64);
    for t in thresholds {
        let tp = s.iter().filter(|x| x.score >= t && x.label == 1).count() as u64;
        let fp = s.iter().filter(|x| x.score >= t && x.label == 0).count() as u64;
        ap += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap / pos as f64
}

#[test]
fn matches_brute_force_oracles_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let s = instance(&mut rng);
        assert_eq!(auroc(&s).unwrap(), brute_auroc(&s));
        assert_eq!(average_precision(&s).unwrap(), brute_ap(&s));
        let c = curves(&s).unwrap();
        assert!((c.roc_trapezoid() - auroc(&s).unwrap()).abs() < 1e-12);
        assert!((c.pr_step_sum() - average_precision(&s).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn perfect_and_degenerate_classifiers() {
    let perfect: Vec<_> = (0..50)
        .map(|i| ScoredSample::new(i as f64 / 50.0, u8::from(i >= 25)))
        .collect();
    assert_eq!(auroc(&perfect).unwrap(), 1.0);
    assert_eq!(average_precision(&perfect).unwrap(), 1.0);
    let tied: Vec<_> = (0..10).map(|i| ScoredSample::new(0.3, (i % 2) as u8)).collect();
    assert_eq!(auroc(&tied).unwrap(), 0.5);
    let one_class = vec![ScoredSample::new(0.2, 1); 3];
    assert!(matches!(auroc(&one_class), Err(Error::UndefinedMetric(_))));
    assert!(matches!(curves(&one_class), Err(Error::UndefinedMetric(_))));
    let no_pos = vec![ScoredSample::new(0.2, 0); 3];
    assert!(matches!(average_precision(&no_pos), Err(Error::UndefinedMetric(_))));
}

#[test]
fn shuffled_scores_give_prevalence_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 10 < 3)).collect();
    let mut scores: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
    let mut total = 0.0;
    for _ in 0..1000 {
        scores.shuffle(&mut rng);
        let s: Vec<_> = scores
            .iter()
            .zip(&labels)
            .map(|(&x, &l)| ScoredSample::new(x, l))
            .collect();
        total += average_precision(&s).unwrap();
    }
    assert!((total / 1000.0 - 0.3).abs() < 0.05);
}

#[test]
fn strictly_increasing_transform_is_invisible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let s = instance(&mut rng);
        let t: Vec<_> = s
            .iter()
            .map(|x| ScoredSample::new((3.0 * x.score).exp() / 30.0, x.label))
            .collect();
        assert_eq!(auroc(&s).unwrap(), auroc(&t).unwrap());
        assert_eq!(average_precision(&s).unwrap(), average_precision(&t).unwrap());
        let (a, b) = (curves(&s).unwrap(), curves(&t).unwrap());
        let xy = |c: &Vec<CurvePoint>| c.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>();
        assert_eq!(xy(&a.roc), xy(&b.roc));
        assert_eq!(xy(&a.pr), xy(&b.pr));
    }
}

#[test]
fn label_flip_duality_without_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.gen_range(2..100);
        let mut s: Vec<_> = (0..n)
            .map(|i| ScoredSample::new(rng.gen::<f64>() + i as f64 * 1e-9, rng.gen_range(0..=1)))
            .collect();
        s[0].label = 0;
        s[1].label = 1;
        let flipped: Vec<_> = s
            .iter()
            .map(|x| ScoredSample::new(-x.score, 1 - x.label))
            .collect();
        let (a, b) = (auroc(&s).unwrap(), auroc(&flipped).unwrap());
        // Negating scores and flipping labels maps every concordant pair to
        // a concordant pair, so the area is preserved.
        assert!((a - b).abs() < 1e-12);
        let only_negated: Vec<_> = s.iter().map(|x| ScoredSample::new(-x.score, x.label)).collect();
        assert!((auroc(&only_negated).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn roc_points_are_monotone_and_end_at_corners() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let s = instance(&mut rng);
        let c = curves(&s).unwrap();
        let mut distinct: Vec<f64> = s.iter().map(|x| x.score).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(c.roc.len(), distinct.len() + 1);
        assert_eq!((c.roc[0].x, c.roc[0].y), (0.0, 0.0));
        let last = c.roc.last().unwrap();
        assert_eq!((last.x, last.y), (1.0, 1.0));
        for w in c.roc.windows(2) {
            assert!(w[1].x >= w[0].x && w[1].y >= w[0].y);
        }
    }
}

#[test]
fn confusion_rows_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let s = instance(&mut rng);
        let d = rng.gen::<f64>();
        let c = confusion(&s, d).unwrap();
        assert_eq!(c.total(), s.len() as u64);
        for row in c.normalized {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
        }
    }
    let s = vec![ScoredSample::new(0.9, 1), ScoredSample::new(0.2, 0)];
    let c = confusion(&s, 0.0).unwrap();
    assert_eq!((c.tp, c.fp), (1, 1));
    assert!(confusion(&s, 1.5).is_err());
}

#[test]
fn report_csv_is_consistent_with_roc_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = instance(&mut rng);
    let r = EvalReport::compute(&s, DEFAULT_THRESHOLD).unwrap();
    let parsed = parse_metrics_csv(&r.metrics_csv()).unwrap();
    let auc = parsed.iter().find(|(k, _)| k == "auroc").unwrap().1;
    let pts: Vec<(f64, f64)> = r
        .roc_csv()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            (f[0], f[1])
        })
        .collect();
    let trap: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    assert!((auc - trap).abs() < 1e-12);
    assert!(r.roc_svg().contains("<polyline"));
    assert!(r.pr_svg().contains("<polyline"));
}
