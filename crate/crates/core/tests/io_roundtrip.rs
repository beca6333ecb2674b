use std::fs;

use rankmix_core::io::{
    dataset_digest, load_dataset, load_params, load_results, save_dataset, save_results, ResultsDocument, RunManifest,
    Schema,
};
use rankmix_core::plackett_luce::SupportVector;
use rankmix_core::report::report_summaries;
use rankmix_core::rng::stream_rng;
use rankmix_core::{fit, generate_dataset, FitConfig, ModelParams};

fn params() -> ModelParams {
    let sv = |w: &[f64]| SupportVector::normalized(w.to_vec()).unwrap();
    ModelParams::new(
        vec![0.4, 0.25],
        vec![vec![sv(&[5., 3., 1., 1.]), sv(&[1., 1., 3., 5.])], vec![sv(&[4., 1., 1.]), sv(&[1., 1., 4.])]],
        vec![false, false],
    )
    .unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i:03}")).collect()
}

#[test]
fn dataset_survives_csv_and_row_shuffles() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&params(), 30, &[3, 2], &mut stream_rng(1, 0)).unwrap().data;
    let schema = Schema::anonymous(&[4, 3]);
    let path = dir.path().join("d.csv");
    save_dataset(&path, &data, &ids(30), &schema.variable_ids()).unwrap();
    let loaded = load_dataset(&path, &schema).unwrap();
    assert_eq!(loaded.data, data);
    assert_eq!(loaded.individual_ids, ids(30));

    // reversed body rows give the same dataset and digest
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let header = lines.remove(0);
    lines.reverse();
    let shuffled = dir.path().join("r.csv");
    fs::write(&shuffled, format!("{header}\n{}\n", lines.join("\n"))).unwrap();
    let again = load_dataset(&shuffled, &schema).unwrap();
    assert_eq!(again.data, data);
    assert_eq!(dataset_digest(&again), dataset_digest(&loaded));
}

#[test]
fn incomplete_individuals_are_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    fs::write(&path, "individual_id,variable_id,rank_level,alternative\na,V1,1,2\na,V2,1,3\nb,V1,1,1\n").unwrap();
    let loaded = load_dataset(&path, &Schema::anonymous(&[4, 3])).unwrap();
    assert_eq!(loaded.individual_ids, vec!["a"]);
    assert_eq!(loaded.dropped_ids, vec!["b"]);
}

#[test]
fn results_document_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&params(), 40, &[2, 2], &mut stream_rng(2, 0)).unwrap().data;
    let cfg = FitConfig { n_subgroups: 2, seed: 3, ..Default::default() };
    let result = fit(&data, &cfg).unwrap();
    let manifest = RunManifest::new("fit", 3, &cfg, "d".into()).unwrap();
    let variables = vec!["V1".to_string(), "V2".to_string()];
    let doc = ResultsDocument::new(&result, report_summaries(&result), manifest, variables, ids(40));
    let path = dir.path().join("fit.json");
    save_results(&path, &doc).unwrap();

    let back = load_results(&path).unwrap();
    for (a, b) in back.params.alpha.iter().zip(&result.params.alpha) {
        assert!(((a - b) / b).abs() <= 5e-12);
    }
    for (row_a, row_b) in back.params.theta.iter().zip(&result.params.theta) {
        for (a, b) in row_a.iter().zip(row_b) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 5e-12 * y.max(1e-300) + 1e-300);
            }
        }
    }
    assert_eq!(back.manifest.converged, result.converged);
    assert_eq!(load_params(&path).unwrap(), back.params);

    // the stored report block agrees with one recomputed from the stored parameters
    let stored: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let recomputed = back.report();
    for (k, f) in recomputed.relative_frequencies.iter().enumerate() {
        let s = stored["report"]["relative_frequencies"][k].as_f64().unwrap();
        assert!((s - f).abs() < 1e-10);
    }
    assert_eq!(
        stored["report"]["modal_subgroup"].as_array().unwrap().len(),
        recomputed.modal_subgroup.len()
    );
}
