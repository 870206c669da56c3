mod common;

use common::*;
use gazebench::evalpipe::{eval_detection, eval_gaze_instances, instance_tp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn detection_ap_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    for scene in 0..200 {
        let (preds, gts) = micro_scene(&mut rng);
        let m = eval_detection(&preds, &gts);
        let mut classes: Vec<usize> = gts.iter().flatten().map(|g| g.1).collect();
        classes.sort_unstable();
        classes.dedup();
        for &c in &classes {
            let want: f64 = thresholds.iter().map(|&t| oracle_ap(&preds, &gts, c, t)).sum::<f64>() / 10.0;
            assert_eq!(m.per_class[&c], want, "scene {scene} class {c}");
        }
        let n = classes.len().max(1) as f64;
        let ap50: f64 = classes.iter().map(|&c| oracle_ap(&preds, &gts, c, 0.5)).sum::<f64>() / n;
        assert_eq!(m.ap50, ap50, "scene {scene}");
        assert!(m.excluded.iter().all(|c| !classes.contains(c)));
    }
}

#[test]
fn instance_gate_truth_table() {
    let table = TRUTH_TABLE;
    for (i, &(a, b, c, want)) in table.iter().enumerate() {
        let (p, g) = instance_case(a, b, c);
        let direct = instance_tp(gazebench::boxgeom::iou(&p.head, &g.head), gazebench::heatmap::l2_dist(p.point, g.point), c);
        assert_eq!(direct, want, "case {i}");
        let m = eval_gaze_instances(&[vec![p]], &[vec![g]]);
        assert_eq!(m.true_positives, want as usize, "case {i}");
        assert_eq!(m.map, if want { 1.0 } else { 0.0 }, "case {i}");
    }
}

#[test]
fn metrics_command_reproduces_sweep_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt, msoc_row, wuoc_row) = sweep_fixture();
    let (pp, gp) = (dir.path().join("pred.json"), dir.path().join("gt.json"));
    std::fs::write(&pp, pred.to_string()).unwrap();
    std::fs::write(&gp, gt.to_string()).unwrap();
    let out = cli(&["metrics", "--pred", p(&pp), "--gt", p(&gp), "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let row = |k: &str| -> Vec<f64> { v[k]["values"].as_array().unwrap().iter().map(|x| 100.0 * x.as_f64().unwrap()).collect() };
    assert_eq!(row("msoc"), msoc_row);
    assert_eq!(row("wuoc"), wuoc_row);
    let table = cli(&["metrics", "--pred", p(&pp), "--gt", p(&gp)]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.contains("mSoC"), "{text}");
    assert!(text.lines().nth(1).unwrap().trim_end().ends_with("41.0"), "{text}");

    // Identical predictions give 100 everywhere; a version mismatch exits 5.
    let same = cli(&["metrics", "--pred", p(&gp), "--gt", p(&gp), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&same.stdout).unwrap();
    assert!(v["msoc"]["values"].as_array().unwrap().iter().all(|x| x.as_f64() == Some(1.0)));
    std::fs::write(&pp, pred.to_string().replace("gazesamples-1", "gazesamples-0")).unwrap();
    assert_eq!(cli(&["metrics", "--pred", p(&pp), "--gt", p(&gp)]).status.code(), Some(5));
}

#[test]
fn adjacent_equal_boxes_split_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let one = |b: [f64; 4]| serde_json::json!({ "version": "gazesamples-1", "samples": [{ "box": b }] });
    let (pp, gp) = (dir.path().join("p.json"), dir.path().join("g.json"));
    std::fs::write(&pp, one([0.0, 0.0, 1.0, 1.0]).to_string()).unwrap();
    std::fs::write(&gp, one([1.0, 0.0, 2.0, 1.0]).to_string()).unwrap();
    let out = cli(&["metrics", "--pred", p(&pp), "--gt", p(&gp), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let vals = |k: &str| -> Vec<f64> { v[k]["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    assert!(vals("wuoc").iter().all(|x| *x == 1.0));
    assert_eq!(vals("msoc")[0], 1.0);
    assert!(vals("msoc")[1..].iter().all(|x| *x == 0.0));
}
