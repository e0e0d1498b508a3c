use cdeforecast::datastore::{generate_dataset, load, metadata_path, save, windows, DataConfig, PlanArm, Split};
use cdeforecast::sampler::IntensityMode;
use cdeforecast::Error;

fn config(n_train: usize, n_test: usize) -> DataConfig {
    DataConfig {
        n_train,
        n_val: 1,
        n_test,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(4, 2);
    c.intensity.gamma = 6.0;
    let ds = generate_dataset(&c).unwrap();
    let path = dir.path().join("d.csv");
    save(&ds, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ds);

    c.intensity.mode = IntensityMode::SarUnrelated;
    let ds = generate_dataset(&c).unwrap();
    save(&ds, &path).unwrap();
    assert_eq!(load(&path).unwrap(), ds);
}

#[test]
fn two_patient_file_has_expected_records() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&DataConfig { n_val: 0, ..config(1, 1) }).unwrap();
    let path = dir.path().join("two.csv");
    save(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..9], ["patient_id", "split", "arm", "t", "observed", "y_observed", "chemo", "radio", "lambda_true"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // one record per patient and day
    assert_eq!(rows.len(), 2 * 120);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let test_rows: Vec<_> = rows.iter().filter(|r| r[1] == "test").collect();
    assert_eq!(test_rows.len(), 120);
    assert!(test_rows.iter().all(|r| r[4] == "1" && !r[5].is_empty()));
    let observed_train = rows.iter().filter(|r| r[1] == "train" && r[4] == "1").count();

    let back = load(&path).unwrap();
    assert_eq!(back.patients.len(), 2);
    assert!(back.patients.iter().all(|p| p.observations.len() == 120));
    assert_eq!(back.split(Split::Train).next().unwrap().n_observed(), observed_train);
}

#[test]
fn missing_sidecar_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&config(1, 1)).unwrap();
    let path = dir.path().join("d.csv");
    save(&ds, &path).unwrap();
    std::fs::remove_file(metadata_path(&path)).unwrap();
    assert!(matches!(load(&path), Err(Error::Io { .. })));
    assert!(matches!(load(&dir.path().join("none.csv")), Err(Error::Io { .. })));
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&config(1, 1)).unwrap();
    let path = dir.path().join("d.csv");
    save(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5] = lines[5].replacen(",0,", ",maybe,", 1).replacen(",1,", ",maybe,", 1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    match load(&path) {
        Err(Error::Parse { record, .. }) => assert_eq!(record, 6),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn test_windows_cover_every_origin() {
    let ds = generate_dataset(&config(2, 3)).unwrap();
    let ws: Vec<_> = windows(&ds, Split::Test, PlanArm::Factual).collect();
    // origins 7..=115 on a fully observed 120-day record
    assert_eq!(ws.len(), 3 * 109);
    assert_eq!(ws.first().unwrap().origin, 7);
    assert_eq!(ws.last().unwrap().origin, 115);
    let first: Vec<_> = windows(&ds, Split::Train, PlanArm::Factual).collect();
    let second: Vec<_> = windows(&ds, Split::Train, PlanArm::Factual).collect();
    assert_eq!(first, second);
}
