//! Gate-activation recording and aggregation: raw per-gate traces,
//! normalized histograms over early/mid/late depth bands, and per-gate
//! summary statistics.

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::csv_err;
use crate::error::{invalid, Result};
use crate::numkit::Vector;
use crate::trainer::TinyMlp;

pub const DEFAULT_BINS: usize = 50;

/// One post-sigmoid gate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub layer: usize,
    pub rank: usize,
    /// Position of the input across all recorded domains.
    pub sample: usize,
    pub domain: String,
    pub value: f64,
}

/// Gate values of every DISeL layer and rank for a set of tagged inputs.
/// `(layer, rank, sample)` is unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateTrace {
    records: Vec<GateRecord>,
}

/// Inputs sharing a caller-chosen domain tag.
#[derive(Debug, Clone, Copy)]
pub struct Domain<'a> {
    pub tag: &'a str,
    pub inputs: &'a [Vector],
}

impl<'a> Domain<'a> {
    pub fn new(tag: &'a str, inputs: &'a [Vector]) -> Self {
        Self { tag, inputs }
    }
}

impl GateTrace {
    /// Checks that every value lies strictly inside (0, 1) and that no
    /// `(layer, rank, sample)` repeats.
    pub fn from_records(records: Vec<GateRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !(r.value > 0.0 && r.value < 1.0) {
                return invalid(format!("gate value {} outside (0, 1)", r.value));
            }
            if !seen.insert((r.layer, r.rank, r.sample)) {
                return invalid(format!(
                    "duplicate gate record (layer {}, rank {}, sample {})",
                    r.layer, r.rank, r.sample
                ));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[GateRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct layer indices.
    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.records.iter().map(|r| r.layer).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Domain tags in order of first appearance.
    pub fn domains(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.domain.as_str()) {
                out.push(&r.domain);
            }
        }
        out
    }

    /// Columns `layer,rank,sample,domain,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "rank", "sample", "domain", "value"])
            .map_err(csv_err)?;
        for r in &self.records {
            out.write_record([
                r.layer.to_string(),
                r.rank.to_string(),
                r.sample.to_string(),
                r.domain.clone(),
                r.value.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every input through `model` and records each gate it produces.
/// Sample ids count inputs across domains in the order given.
pub fn record_gates(model: &TinyMlp, domains: &[Domain<'_>]) -> Result<GateTrace> {
    if !model.has_disel() {
        return invalid("gate recording needs a model with at least one DISeL adapter");
    }
    if domains.is_empty() {
        return invalid("gate recording needs at least one domain");
    }
    let mut records = Vec::new();
    let mut sample = 0;
    for d in domains {
        for x in d.inputs {
            for (layer, g) in model.gate_vectors(x)? {
                records.extend(g.iter().enumerate().map(|(rank, &value)| GateRecord {
                    layer,
                    rank,
                    sample,
                    domain: d.tag.to_string(),
                    value,
                }));
            }
            sample += 1;
        }
    }
    Ok(GateTrace { records })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Early,
    Mid,
    Late,
}

impl Band {
    pub const ALL: [Band; 3] = [Band::Early, Band::Mid, Band::Late];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Early => "early",
            Band::Mid => "mid",
            Band::Late => "late",
        }
    }
}

/// Splits sorted layer indices into three contiguous bands; when the count
/// is not divisible by three the earlier bands take one extra layer each.
pub fn depth_bands(layers: &[usize]) -> [Vec<usize>; 3] {
    let n = layers.len();
    let (base, rem) = (n / 3, n % 3);
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut start = 0;
    for (i, band) in out.iter_mut().enumerate() {
        let len = base + usize::from(i < rem);
        *band = layers[start..start + len].to_vec();
        start += len;
    }
    out
}

/// Normalized gate-value histogram of one domain within one band.
#[derive(Debug, Clone, PartialEq)]
pub struct BandHistogram {
    pub band: Band,
    pub domain: String,
    /// Fractions of the band's gate values per bin; they sum to 1.
    pub mass: Vec<f64>,
    pub count: usize,
}

impl BandHistogram {
    /// Fraction of values in bins whose left edge is at least `t`.
    pub fn mass_from(&self, t: f64) -> f64 {
        let bins = self.mass.len();
        self.mass
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as f64 / bins as f64 >= t)
            .map(|(_, m)| m)
            .sum()
    }

    /// Fraction of values in bins whose right edge is at most `t`.
    pub fn mass_below(&self, t: f64) -> f64 {
        let bins = self.mass.len();
        self.mass
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i + 1) as f64 / bins as f64 <= t)
            .map(|(_, m)| m)
            .sum()
    }
}

/// Uniform bins over [0, 1] per depth band and domain. Empty bands (fewer
/// than three adapted layers) carry no histograms.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSet {
    pub bins: usize,
    pub bands: [Vec<usize>; 3],
    pub histograms: Vec<BandHistogram>,
}

pub fn bin_index(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Each recorded gate value counts once, whatever its layer or rank.
pub fn depth_band_histograms(trace: &GateTrace, bins: usize) -> Result<HistogramSet> {
    if bins < 2 {
        return invalid(format!("histograms need at least 2 bins, got {bins}"));
    }
    if trace.is_empty() {
        return invalid("cannot build histograms from an empty gate trace");
    }
    let bands = depth_bands(&trace.layers());
    let band_of: BTreeMap<usize, Band> = bands
        .iter()
        .zip(Band::ALL)
        .flat_map(|(ls, b)| ls.iter().map(move |&l| (l, b)))
        .collect();
    let domains = trace.domains();
    let mut counts: BTreeMap<(Band, usize), Vec<usize>> = BTreeMap::new();
    for r in trace.records() {
        let d = domains
            .iter()
            .position(|&t| t == r.domain)
            .expect("domain listed");
        counts
            .entry((band_of[&r.layer], d))
            .or_insert_with(|| vec![0; bins])[bin_index(r.value, bins)] += 1;
    }
    let histograms = counts
        .into_iter()
        .map(|((band, d), c)| {
            let total: usize = c.iter().sum();
            BandHistogram {
                band,
                domain: domains[d].to_string(),
                mass: c.iter().map(|&k| k as f64 / total as f64).collect(),
                count: total,
            }
        })
        .collect();
    Ok(HistogramSet {
        bins,
        bands,
        histograms,
    })
}

impl HistogramSet {
    pub fn get(&self, band: Band, domain: &str) -> Option<&BandHistogram> {
        self.histograms
            .iter()
            .find(|h| h.band == band && h.domain == domain)
    }

    /// Columns `band,domain,bin_left,bin_right,normalized_count`, bands in
    /// depth order and domains in order of first appearance in the trace.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "band",
            "domain",
            "bin_left",
            "bin_right",
            "normalized_count",
        ])
        .map_err(csv_err)?;
        let n = self.bins as f64;
        for h in &self.histograms {
            for (i, m) in h.mass.iter().enumerate() {
                out.write_record([
                    h.band.as_str().to_string(),
                    h.domain.clone(),
                    (i as f64 / n).to_string(),
                    ((i + 1) as f64 / n).to_string(),
                    m.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Mean and population standard deviation of one gate over the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStat {
    pub layer: usize,
    pub rank: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMean {
    /// `None` aggregates every layer.
    pub layer: Option<usize>,
    pub domain: String,
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub gates: Vec<GateStat>,
    /// Overall per-domain means first, then per layer.
    pub domains: Vec<DomainMean>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn gate_summary(trace: &GateTrace) -> Result<GateSummary> {
    if trace.is_empty() {
        return invalid("cannot summarise an empty gate trace");
    }
    let mut per_gate: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in trace.records() {
        per_gate.entry((r.layer, r.rank)).or_default().push(r.value);
    }
    let gates = per_gate
        .into_iter()
        .map(|((layer, rank), v)| {
            let (mean, std) = mean_std(&v);
            GateStat {
                layer,
                rank,
                count: v.len(),
                mean,
                std,
            }
        })
        .collect();
    let mut domains = Vec::new();
    for layer in std::iter::once(None).chain(trace.layers().into_iter().map(Some)) {
        for tag in trace.domains() {
            let v: Vec<f64> = trace
                .records()
                .iter()
                .filter(|r| r.domain == tag && layer.is_none_or(|l| r.layer == l))
                .map(|r| r.value)
                .collect();
            if !v.is_empty() {
                domains.push(DomainMean {
                    layer,
                    domain: tag.to_string(),
                    count: v.len(),
                    mean: mean_std(&v).0,
                });
            }
        }
    }
    Ok(GateSummary { gates, domains })
}

impl GateSummary {
    pub fn domain_mean(&self, domain: &str) -> Option<f64> {
        self.domains
            .iter()
            .find(|d| d.layer.is_none() && d.domain == domain)
            .map(|d| d.mean)
    }

    /// Columns `layer,rank,count,mean,std`.
    pub fn write_gates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "rank", "count", "mean", "std"])
            .map_err(csv_err)?;
        for g in &self.gates {
            out.write_record([
                g.layer.to_string(),
                g.rank.to_string(),
                g.count.to_string(),
                g.mean.to_string(),
                g.std.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Columns `layer,domain,count,mean`; the layer cell is `all` for the
    /// overall means.
    pub fn write_domains_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "domain", "count", "mean"])
            .map_err(csv_err)?;
        for d in &self.domains {
            out.write_record([
                d.layer.map_or_else(|| "all".to_string(), |l| l.to_string()),
                d.domain.clone(),
                d.count.to_string(),
                d.mean.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}
