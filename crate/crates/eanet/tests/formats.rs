use eanet::csv_long::{read_csv_long, write_csv_long, TargetKind};
use eanet::eanet_core::data::{Targets, TimeSeriesDataset};
use eanet::tables::{read_metrics_table, write_metrics_table};

fn awkward_dataset() -> TimeSeriesDataset {
    let (t, c) = (5, 2);
    let mut values = vec![0.0; 3 * t * c];
    let specials = [
        0.1 + 0.2,
        1.0 / 3.0,
        1e-300,
        -2.5e10,
        f64::MIN_POSITIVE,
        123456789.12345679,
        -0.0,
        2f64.sqrt(),
    ];
    let lengths = vec![5, 3, 4];
    for (i, &len) in lengths.iter().enumerate() {
        for k in 0..len * c {
            values[i * t * c + k] = specials[(i * 7 + k) % specials.len()] * (1.0 + k as f64 / 7.0);
        }
    }
    let ids = vec!["alpha".to_string(), "beta".to_string(), "gamma,quoted".to_string()];
    let targets = Targets::Regression(vec![1.0 / 7.0, -1e-5, 3e8 + 0.5]);
    TimeSeriesDataset::new(t, c, values, lengths, ids, targets).unwrap()
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let ds = awkward_dataset();
    let mut buf = Vec::new();
    write_csv_long(&mut buf, &ds).unwrap();
    let back = read_csv_long(buf.as_slice(), TargetKind::Regression, "mem").unwrap();
    assert_eq!(back.lengths, ds.lengths);
    assert_eq!(back.ids, ds.ids);
    assert_eq!(back.targets, ds.targets);
    let bits = |d: &TimeSeriesDataset| d.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&ds));
}

#[test]
fn class_labels_survive_a_round_trip() {
    let ds = TimeSeriesDataset::new(
        2,
        1,
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        vec![2, 2, 2],
        vec!["a".into(), "b".into(), "c".into()],
        Targets::Classes {
            labels: vec![2, 0, 1],
            n_classes: 3,
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    write_csv_long(&mut buf, &ds).unwrap();
    let back = read_csv_long(buf.as_slice(), TargetKind::Classes { n_classes: None }, "mem").unwrap();
    assert_eq!(back, ds);
}

#[test]
fn metrics_tables_round_trip() {
    let text = "dataset,A,B,C\nd1,0.1,0.2,0.3\nd2,1e-3,5,7.25\n";
    let table = read_metrics_table(text.as_bytes(), "mem", false).unwrap();
    let mut buf = Vec::new();
    write_metrics_table(&mut buf, &table, "dataset").unwrap();
    let back = read_metrics_table(buf.as_slice(), "mem", false).unwrap();
    assert_eq!(back, table);
}
