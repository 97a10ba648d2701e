use bikedemand::config::ExperimentConfig;
use bikedemand::grid::{read_tensor, split_train_val, write_tensor};
use bikedemand::model::{ModelKind, CSV_HEADER};
use bikedemand::pipeline::{evaluate_run, load_demand, neighbors_for, run_experiment, write_artifacts};
use bikedemand::synth::{GroupLayout, SyntheticCitySpec};
use bikedemand::Execution;

fn small(kind: ModelKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        id: format!("small-{kind}"),
        kind,
        seed: 5,
        synth: Some(SyntheticCitySpec {
            width: 4,
            height: 4,
            bins: 24 * 7 * 3,
            noise: 1.0,
            seed: 5,
            ..Default::default()
        }),
        ..Default::default()
    };
    cfg.model.hidden = 8;
    cfg.model.filters = vec![4, 1];
    cfg.model.sampling.closeness = 3;
    cfg.model.sampling.period = 2;
    cfg.model.sampling.trend = 1;
    cfg.training.epochs = 2;
    cfg
}

#[test]
fn every_kind_round_trips_through_a_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let cfg = small(kind);
        let (demand, ingest, groups) = load_demand(&cfg).unwrap();
        assert!(ingest.is_none());
        assert_eq!(groups.unwrap().len(), 16);

        let run = run_experiment(&cfg, &demand, Execution::Parallel).unwrap();
        assert_eq!(run.outcome.history.len(), 2);
        let dir = tmp.path().join(kind.as_str());
        write_artifacts(&dir, &run).unwrap();

        let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        let again = evaluate_run(&cfg, &demand, &dir, Execution::Sequential).unwrap();
        assert_eq!(again.to_csv(&cfg.id), run.report.to_csv(&cfg.id));
        assert_eq!(dir.join("similarity.csv").exists(), run.similarity.is_some());
    }
}

#[test]
fn tensor_source_matches_the_generated_city() {
    let tmp = tempfile::tempdir().unwrap();
    let synth_cfg = small(ModelKind::LstmOnly);
    let (demand, _, _) = load_demand(&synth_cfg).unwrap();
    let path = tmp.path().join("city.bdt");
    write_tensor(&path, &demand).unwrap();
    assert_eq!(read_tensor(&path).unwrap(), demand);

    let mut cfg = synth_cfg.clone();
    cfg.synth = None;
    cfg.data.tensor = Some(path);
    let (loaded, _, groups) = load_demand(&cfg).unwrap();
    assert!(groups.is_none());
    let a = run_experiment(&synth_cfg, &demand, Execution::Sequential).unwrap();
    let b = run_experiment(&cfg, &loaded, Execution::Sequential).unwrap();
    assert_eq!(a.report.to_csv("x"), b.report.to_csv("x"));
}

#[test]
fn pearson_neighbors_stay_within_a_phase_group() {
    let mut cfg = small(ModelKind::IrconvPearson);
    let spec = cfg.synth.as_mut().unwrap();
    spec.width = 6;
    spec.height = 6;
    spec.layout = GroupLayout::Shuffled;
    spec.noise = 0.5;
    let (demand, _, groups) = load_demand(&cfg).unwrap();
    let groups = groups.unwrap();
    let (train, _) = split_train_val(&demand, cfg.split_ratio, cfg.model.sampling.max_lookback()).unwrap();
    let idx = neighbors_for(cfg.kind, &train, 9, None, Execution::Sequential).unwrap().unwrap();
    for (cell, list) in idx.entries() {
        assert_eq!(list[0], Some(cell));
        for n in list[1..].iter().flatten() {
            assert_eq!(groups[n.flat(idx.height)], groups[cell.flat(idx.height)], "{cell:?} -> {n:?}");
        }
    }
}
