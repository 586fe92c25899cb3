use maxplus_hjb::bench::{
    build_problem, parse_matrix, read_slice_csv, write_slice_csv, ExperimentConfig, OracleFile, SliceRow,
};
use maxplus_hjb::problem::{MaxPlusValueFunction, QuadraticForm};
use maxplus_hjb::simulation::{simulate, InitialSampler, PathDump};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn form(q: [f64; 3], b: [f64; 2], c: f64) -> QuadraticForm {
    QuadraticForm::new(
        DMatrix::from_row_slice(2, 2, &[q[0], q[1], q[1], q[2]]),
        DVector::from_row_slice(&b),
        c,
    )
    .unwrap()
}

#[test]
fn value_function_json_is_lossless() {
    let sets = vec![
        vec![form([0.1, 0.2, -0.3], [1.0 / 3.0, -2.0], 0.7)],
        vec![form([0.0; 3], [0.0; 2], 1.0), form([-1e-9, 0.0, 4.0], [1e6, 0.5], -3.25)],
    ];
    let vf = MaxPlusValueFunction::new(2, 0.5, 0.5, sets).unwrap();
    let back = MaxPlusValueFunction::from_json(&vf.to_json().unwrap()).unwrap();
    for step in 0..=1 {
        for x in [[0.0, 0.0], [1.5, -2.0], [100.0, 3.0]] {
            assert_eq!(vf.value_at_step(step, &x).unwrap(), back.value_at_step(step, &x).unwrap());
        }
    }
    assert!(MaxPlusValueFunction::from_json("{\"dim\": 2}").is_err());
}

#[test]
fn path_dump_rebuilds_states() {
    let cfg = ExperimentConfig::from_json(r#"{"name": "io", "n_in": 60, "n_x": 10, "n_w": 10, "horizon": 0.03}"#)
        .unwrap();
    let (spec, gens, _, _) = build_problem(&cfg).unwrap();
    let paths = simulate(&spec, &gens, cfg.h, 20, 9, &InitialSampler::uniform(vec![50.0, 50.0], 5.0), None).unwrap();
    let bytes = paths.to_dump().encode();
    let dump = PathDump::decode(&bytes).unwrap();
    assert_eq!(dump.encode(), bytes);
    let rebuilt = dump.into_paths(&gens, cfg.h, None).unwrap();
    for step in 0..=paths.steps() {
        for omega in 0..20 {
            assert_eq!(paths.state(0, step, omega), rebuilt.state(0, step, omega));
        }
    }
    assert!(PathDump::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn slice_csv_is_bit_exact() {
    let rows = vec![
        SliceRow { t: 0.0, x_sweep: -50.0, value: 0.1 + 0.2, stderr_proxy: 1e-300 },
        SliceRow { t: 0.0, x_sweep: 0.5, value: std::f64::consts::PI, stderr_proxy: 0.0 },
    ];
    let mut buf = Vec::new();
    write_slice_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("t,x_sweep,value,stderr_proxy\n"));
    assert_eq!(read_slice_csv(&buf).unwrap(), rows);
    assert!(read_slice_csv(b"a,b\n1,2\n").is_err());
}

#[test]
fn committed_oracle_fixture_loads() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/oracle_d2_rho0.json");
    let oracle = OracleFile::load(&path).unwrap();
    assert_eq!(oracle.points.len(), 101);
    assert_eq!(oracle.market.correlation, 0.0);
    assert!(oracle.points.iter().all(|p| (0.0..=10.0).contains(&p.value)));
    let mid = &oracle.points[50];
    assert_eq!(mid.x_sweep, 0.0);
    assert!((mid.value - 4.8717045).abs() < 1e-6, "{}", mid.value);
}

#[test]
fn matrix_argument() {
    assert_eq!(parse_matrix("1,2;3,4").unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    for bad in ["", "1,2;3", "1,x;3,4", "nan,0;0,1"] {
        assert!(parse_matrix(bad).is_err(), "{bad:?}");
    }
}

proptest! {
    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = PathDump::decode(&bytes);
        let _ = read_slice_csv(&bytes);
        let text = String::from_utf8_lossy(&bytes);
        let _ = ExperimentConfig::from_json(&text);
        let _ = OracleFile::from_json(&text);
        let _ = MaxPlusValueFunction::from_json(&text);
        let _ = parse_matrix(&text);
    }
}

#[test]
fn fuzz_seeds_decode() {
    let corpus = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let read = |p: &str| std::fs::read(corpus.join(p)).unwrap();
    let text = |p: &str| String::from_utf8(read(p)).unwrap();
    for c in ["d2_rho0", "d2_rho08", "d5_smoke"] {
        ExperimentConfig::from_json(&text(&format!("config_json/{c}.json"))).unwrap().validate().unwrap();
    }
    MaxPlusValueFunction::from_json(&text("value_function_json/small.json")).unwrap();
    let dump = PathDump::decode(&read("path_dump/small.bin")).unwrap();
    assert_eq!((dump.dim, dump.n_in, dump.steps), (2, 3, 2));
    assert_eq!(read_slice_csv(&read("slice_csv/small.csv")).unwrap().len(), 5);
    OracleFile::from_json(&text("oracle_json/small.json")).unwrap();
    parse_matrix(&text("matrix_arg/sym.txt")).unwrap();
    assert!(parse_matrix(&text("matrix_arg/bad.txt")).is_err());
}
