use freqsense_harness::export::{export_csv, export_pgm, format_number, to_csv, Cell, Table};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[test]
fn csv_round_trips_to_nine_significant_digits() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
    let mut t = Table::new(&["k", "value", "label"]);
    let mut source = Vec::new();
    for k in 0..500usize {
        let v: f64 = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-30..30));
        source.push(v);
        t.push(vec![k.into(), v.into(), Cell::Text(format!("row{k}"))]);
    }
    let text = to_csv(&t).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,value,label"));
    for (k, (line, v)) in lines.zip(&source).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0].parse::<usize>().unwrap(), k);
        let back: f64 = cols[1].parse().unwrap();
        assert!(((back - v) / v).abs() <= 5e-9, "{v} -> {back}");
        // reformatting the parsed value reproduces the text
        assert_eq!(format_number(back), cols[1]);
        assert_eq!(cols[2], format!("row{k}"));
    }
}

#[test]
fn ragged_rows_and_quoting_are_rejected() {
    let mut t = Table::new(&["a", "b"]);
    t.push(vec![1usize.into()]);
    assert!(to_csv(&t).is_err());
    let mut t = Table::new(&["a"]);
    t.push(vec!["x,y".into()]);
    assert!(to_csv(&t).is_err());
}

#[test]
fn files_are_written_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("m.pgm");
    export_pgm(&[0.0, 1.0, 0.5, 0.25, -3.0, 7.0], 2, 3, &pgm).unwrap();
    let mut expected = b"P5\n3 2\n255\n".to_vec();
    expected.extend([0, 255, 128, 64, 0, 255]);
    assert_eq!(std::fs::read(&pgm).unwrap(), expected);
    let csv = dir.path().join("t.csv");
    let mut t = Table::new(&["x"]);
    t.push(vec![0.1.into()]);
    export_csv(&t, &csv).unwrap();
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "x\n1.00000000e-1\n");
}
