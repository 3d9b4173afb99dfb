use std::path::Path;

use disel::diagnostics::{depth_band_histograms, gate_summary, Band, GateRecord, GateTrace};

/// Gate `(layer, rank)` reads `m + d` on the two `ft` samples and `m - d`
/// on the two `pt` samples, so each gate has mean `m` and population std
/// `d`, all exact in binary.
const GATES: [((usize, usize), (f64, f64)); 8] = [
    ((0, 0), (0.5, 0.375)),
    ((0, 1), (0.5, 0.25)),
    ((1, 0), (0.5, 0.4375)),
    ((1, 1), (0.625, 0.125)),
    ((2, 0), (0.5, 0.0)),
    ((2, 1), (0.375, 0.25)),
    ((3, 0), (0.5, 0.46875)),
    ((3, 1), (0.25, 0.125)),
];

fn trace() -> GateTrace {
    let mut records = Vec::new();
    for ((layer, rank), (m, d)) in GATES {
        for sample in 0..4 {
            let (domain, value) = if sample < 2 {
                ("ft", m + d)
            } else {
                ("pt", m - d)
            };
            records.push(GateRecord {
                layer,
                rank,
                sample,
                domain: domain.into(),
                value,
            });
        }
    }
    GateTrace::from_records(records).unwrap()
}

fn fixture(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read_to_string(path).unwrap()
}

fn render(f: impl FnOnce(&mut Vec<u8>)) -> String {
    let mut buf = Vec::new();
    f(&mut buf);
    String::from_utf8(buf).unwrap()
}

#[test]
fn histogram_csv_matches_golden_file() {
    let h = depth_band_histograms(&trace(), 4).unwrap();
    assert_eq!(h.bands, [vec![0, 1], vec![2], vec![3]]);
    for band in Band::ALL {
        assert!(h.get(band, "ft").is_some() && h.get(band, "pt").is_some());
    }
    assert_eq!(
        render(|b| h.write_csv(b).unwrap()),
        fixture("gates_histograms.csv")
    );
}

#[test]
fn summary_csvs_match_golden_files() {
    let s = gate_summary(&trace()).unwrap();
    assert_eq!(
        render(|b| s.write_gates_csv(b).unwrap()),
        fixture("gates_summary.csv")
    );
    assert_eq!(
        render(|b| s.write_domains_csv(b).unwrap()),
        fixture("gates_domains.csv")
    );
}

#[test]
fn trace_csv_matches_golden_file() {
    assert_eq!(
        render(|b| trace().write_csv(b).unwrap()),
        fixture("gates_trace.csv")
    );
}
