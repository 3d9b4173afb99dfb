use super::*;
use crate::adapters::{AdaptedLinear, Adapter, FrozenLinear};
use crate::datagen::{make_toy_instance, sample_population, ToyInstance};
use crate::numkit::{sigmoid_scalar, standard_normal_matrix, Matrix, RngStream};
use crate::oracle::{bayes_gate_params, realize_bayes_as_disel, Population};
use crate::trainer::{MethodConfig, TinyMlp};
use proptest::prelude::*;

fn inputs(n: usize, d: usize, seed: u64) -> Vec<Vector> {
    let m = standard_normal_matrix(n, d, RngStream::new(seed, 3));
    (0..n).map(|i| m.row_vector(i)).collect()
}

fn disel_net(rank: usize, seed: u64) -> TinyMlp {
    let mut net = TinyMlp::dense(&[4, 6, 6, 5, 2], RngStream::new(seed, 0)).unwrap();
    net.attach(
        &MethodConfig::disel(rank),
        &[0, 1, 2],
        RngStream::new(seed, 1),
    )
    .unwrap();
    net
}

fn record(layer: usize, rank: usize, sample: usize, domain: &str, value: f64) -> GateRecord {
    GateRecord {
        layer,
        rank,
        sample,
        domain: domain.into(),
        value,
    }
}

fn bayes_toy() -> (TinyMlp, crate::oracle::MixtureModel) {
    let cfg = ToyInstance::default();
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let gate = bayes_gate_params(&mm).unwrap();
    let adapter = realize_bayes_as_disel(&mm, &gate, 2).unwrap();
    let layer = AdaptedLinear::new(
        FrozenLinear::new(mm.w0().clone(), None).unwrap(),
        Adapter::Disel(adapter),
    )
    .unwrap();
    (TinyMlp::from_layers(vec![layer]).unwrap(), mm)
}

fn batch_inputs(b: &crate::datagen::Batch) -> Vec<Vector> {
    (0..b.len()).map(|i| b.x.row_vector(i)).collect()
}

#[test]
fn closed_gates_record_sigmoid_of_bias() {
    let mut net = TinyMlp::dense(&[4, 6, 2], RngStream::new(0, 0)).unwrap();
    net.attach(&MethodConfig::disel(3), &[0, 1], RngStream::new(0, 1))
        .unwrap();
    let mut layers = net.into_layers();
    for l in &mut layers {
        if let Adapter::Disel(d) = &mut l.adapter {
            let wg = d.wg().clone();
            let bg = d.bg().clone();
            *d = crate::adapters::DiselAdapter::new(
                d.a().clone(),
                d.b().clone(),
                Matrix::zeros(wg.rows(), wg.cols()),
                bg,
                d.alpha(),
            )
            .unwrap();
        }
    }
    let net = TinyMlp::from_layers(layers).unwrap();
    let xs = inputs(10, 4, 1);
    let trace = record_gates(&net, &[Domain::new("x", &xs)]).unwrap();
    assert_eq!(trace.len(), 2 * 3 * 10);
    for r in trace.records() {
        assert_eq!(r.value, sigmoid_scalar(-3.0));
        assert!((r.value - 0.047426).abs() < 1e-6);
    }
}

#[test]
fn trace_matches_forward_gates() {
    let net = disel_net(3, 4);
    let (a, b) = (inputs(7, 4, 5), inputs(5, 4, 6));
    let trace = record_gates(&net, &[Domain::new("a", &a), Domain::new("b", &b)]).unwrap();
    assert_eq!(trace.len(), 3 * 3 * 12);
    assert_eq!(trace.domains(), vec!["a", "b"]);
    assert_eq!(trace.layers(), vec![0, 1, 2]);
    let all: Vec<&Vector> = a.iter().chain(&b).collect();
    for r in trace.records() {
        let gates = net.gate_vectors(all[r.sample]).unwrap();
        let g = &gates.iter().find(|(l, _)| *l == r.layer).unwrap().1;
        assert_eq!(g[r.rank], r.value);
        assert_eq!(r.domain, if r.sample < 7 { "a" } else { "b" });
    }
    // the trace passes its own validation: values in (0,1), unique keys
    assert!(GateTrace::from_records(trace.records().to_vec()).is_ok());
}

#[test]
fn recording_needs_disel() {
    let xs = inputs(3, 4, 0);
    let mut net = TinyMlp::dense(&[4, 3], RngStream::new(0, 0)).unwrap();
    assert!(record_gates(&net, &[Domain::new("x", &xs)]).is_err());
    net.attach(&MethodConfig::lora(2), &[0], RngStream::new(0, 1))
        .unwrap();
    assert!(matches!(
        record_gates(&net, &[Domain::new("x", &xs)]),
        Err(crate::Error::InvalidArgument(_))
    ));
    assert!(record_gates(&disel_net(2, 0), &[]).is_err());
}

#[test]
fn from_records_rejects_bad_traces() {
    assert!(GateTrace::from_records(vec![record(0, 0, 0, "a", 1.0)]).is_err());
    assert!(GateTrace::from_records(vec![record(0, 0, 0, "a", 0.0)]).is_err());
    assert!(GateTrace::from_records(vec![record(0, 0, 0, "a", f64::NAN)]).is_err());
    assert!(
        GateTrace::from_records(vec![record(0, 0, 0, "a", 0.2), record(0, 0, 0, "b", 0.3)])
            .is_err()
    );
}

#[test]
fn bayes_gates_saturate_on_each_population() {
    let (net, mm) = bayes_toy();
    let ft = sample_population(&mm, Population::Ft, 2000, RngStream::new(1, 1)).unwrap();
    let pt = sample_population(&mm, Population::Pt, 2000, RngStream::new(1, 2)).unwrap();
    let deep: Vec<Vector> = batch_inputs(&ft)
        .into_iter()
        .filter(|x| x[0] >= 1.0)
        .collect();
    assert!(deep.len() > 1900);
    let trace = record_gates(&net, &[Domain::new("ft", &deep)]).unwrap();
    assert!(trace.records().iter().all(|r| r.value >= 0.999));

    let (ft_x, pt_x) = (batch_inputs(&ft), batch_inputs(&pt));
    let trace = record_gates(&net, &[Domain::new("ft", &ft_x), Domain::new("pt", &pt_x)]).unwrap();
    let s = gate_summary(&trace).unwrap();
    assert!(s.domain_mean("ft").unwrap() >= 0.99);
    assert!(s.domain_mean("pt").unwrap() <= 0.01);
}

#[test]
fn depth_band_partition_examples() {
    assert_eq!(depth_bands(&[0, 1, 2]), [vec![0], vec![1], vec![2]]);
    assert_eq!(depth_bands(&[0, 1, 2, 3]), [vec![0, 1], vec![2], vec![3]]);
    assert_eq!(
        depth_bands(&[3, 5, 7, 9, 11]),
        [vec![3, 5], vec![7, 9], vec![11]]
    );
    assert_eq!(depth_bands(&[4, 8]), [vec![4], vec![8], vec![]]);
    assert!(depth_bands(&[]).iter().all(Vec::is_empty));
}

#[test]
fn constant_trace_lands_in_one_bin() {
    let recs = (0..3)
        .flat_map(|l| (0..4).map(move |s| record(l, 0, s, "only", 0.5)))
        .collect();
    let trace = GateTrace::from_records(recs).unwrap();
    let h = depth_band_histograms(&trace, 50).unwrap();
    assert_eq!(h.bands, [vec![0], vec![1], vec![2]]);
    assert_eq!(h.histograms.len(), 3);
    for hist in &h.histograms {
        assert_eq!(hist.mass[25], 1.0);
        assert_eq!(hist.mass.iter().sum::<f64>(), 1.0);
        assert_eq!(hist.count, 4);
    }
    let s = gate_summary(&trace).unwrap();
    assert!(s.gates.iter().all(|g| g.mean == 0.5 && g.std == 0.0));
}

#[test]
fn histogram_arguments_are_checked() {
    let trace = GateTrace::from_records(vec![record(0, 0, 0, "a", 0.3)]).unwrap();
    assert!(depth_band_histograms(&trace, 1).is_err());
    assert!(depth_band_histograms(&GateTrace::default(), 10).is_err());
    assert!(gate_summary(&GateTrace::default()).is_err());
}

#[test]
fn bin_edges() {
    assert_eq!(bin_index(0.0, 4), 0);
    assert_eq!(bin_index(0.25, 4), 1);
    assert_eq!(bin_index(0.999_999, 4), 3);
    assert_eq!(bin_index(1.0, 4), 3);
}

#[test]
fn two_domains_give_two_series_per_band() {
    let net = disel_net(2, 8);
    let (a, b) = (inputs(20, 4, 1), inputs(30, 4, 2));
    let trace = record_gates(&net, &[Domain::new("a", &a), Domain::new("b", &b)]).unwrap();
    let h = depth_band_histograms(&trace, 10).unwrap();
    assert_eq!(h.histograms.len(), 6);
    for band in Band::ALL {
        assert_eq!(h.get(band, "a").unwrap().count, 2 * 20);
        assert_eq!(h.get(band, "b").unwrap().count, 2 * 30);
    }
    let mut csv = Vec::new();
    h.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 6 * 10);
}

#[test]
fn domain_means_match_independent_reduction() {
    let net = disel_net(3, 11);
    let (a, b) = (inputs(40, 4, 3), inputs(25, 4, 4));
    let trace = record_gates(&net, &[Domain::new("a", &a), Domain::new("b", &b)]).unwrap();
    let s = gate_summary(&trace).unwrap();
    for tag in ["a", "b"] {
        // reverse-order pairwise sum as an independent reduction
        let mut v: Vec<f64> = trace
            .records()
            .iter()
            .filter(|r| r.domain == tag)
            .map(|r| r.value)
            .collect();
        v.reverse();
        while v.len() > 1 {
            v = v.chunks(2).map(|c| c.iter().sum()).collect();
        }
        let n = trace.records().iter().filter(|r| r.domain == tag).count() as f64;
        let expected = v[0] / n;
        assert!((s.domain_mean(tag).unwrap() - expected).abs() <= 1e-12);
        let layer0 = s
            .domains
            .iter()
            .find(|d| d.layer == Some(0) && d.domain == tag)
            .unwrap();
        assert_eq!(layer0.count, 3 * if tag == "a" { 40 } else { 25 });
    }
    assert_eq!(s.gates.len(), 9);
    for g in &s.gates {
        assert!(g.mean > 0.0 && g.mean < 1.0 && g.std >= 0.0);
        assert_eq!(g.count, 65);
    }
}

proptest! {
    #[test]
    fn histograms_conserve_mass(
        values in prop::collection::vec(1e-9f64..(1.0 - 1e-9), 1..200),
        n_layers in 1usize..9,
        bins in 2usize..64,
    ) {
        let recs: Vec<GateRecord> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| record(i % n_layers, 0, i, if i % 3 == 0 { "x" } else { "y" }, v))
            .collect();
        let trace = GateTrace::from_records(recs).unwrap();
        let h = depth_band_histograms(&trace, bins).unwrap();
        for hist in &h.histograms {
            prop_assert!((hist.mass.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let total: usize = h.histograms.iter().map(|x| x.count).sum();
        prop_assert_eq!(total, values.len());
    }

    #[test]
    fn bands_partition_layers(layers in prop::collection::btree_set(0usize..100, 0..40)) {
        let layers: Vec<usize> = layers.into_iter().collect();
        let bands = depth_bands(&layers);
        let joined: Vec<usize> = bands.iter().flatten().copied().collect();
        prop_assert_eq!(&joined, &layers);
        let sizes: Vec<usize> = bands.iter().map(Vec::len).collect();
        prop_assert!(sizes[0] >= sizes[1] && sizes[1] >= sizes[2] && sizes[0] - sizes[2] <= 1);
    }
}
