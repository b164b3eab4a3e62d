//! Discrete-time hazard modeling and the survival statistics used for
//! training and evaluation.
//!
//! Censoring convention: `censored == true` means the event was not observed
//! (the patient was alive at last follow-up). Uncensored patients contribute
//! the hazard term of the likelihood.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{sigmoid, DiffError, Graph, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurvivalError {
    #[error("need at least {needed} distinct uncensored times to form bins, found {found}")]
    TooFewEvents { needed: usize, found: usize },
    #[error("bin edges are not strictly increasing: {0:?}")]
    DegenerateEdges(Vec<f64>),
    #[error("no comparable pairs for the concordance index")]
    NoComparablePairs,
    #[error("log-rank test needs at least one event")]
    NoEvents,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time_months: f64,
    pub censored: bool,
    pub bin: usize,
}

impl SurvivalLabel {
    pub fn new(time_months: f64, censored: bool) -> Self {
        Self {
            time_months,
            censored,
            bin: 0,
        }
    }

    pub fn event(&self) -> bool {
        !self.censored
    }
}

/// Interior cut points of a discrete-time grid: `B` bins need `B − 1` edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    /// Index of the bin containing `t`; a time equal to an edge falls in the upper bin.
    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.partition_point(|&e| e <= t)
    }
}

/// Linear-interpolation quantile of sorted data (position `(n − 1)·p`).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile bin edges from the uncensored times, and every patient's bin.
pub fn assign_bins(times: &[f64], censored: &[bool], bins: usize) -> Result<(Vec<usize>, BinEdges), SurvivalError> {
    if times.len() != censored.len() || bins == 0 {
        return Err(SurvivalError::Invalid(format!(
            "assign_bins: {} times, {} censor flags, {bins} bins",
            times.len(),
            censored.len()
        )));
    }
    let mut events: Vec<f64> = times.iter().zip(censored).filter(|(_, &c)| !c).map(|(&t, _)| t).collect();
    events.sort_by(f64::total_cmp);
    let mut distinct = events.clone();
    distinct.dedup();
    if distinct.len() < bins {
        return Err(SurvivalError::TooFewEvents {
            needed: bins,
            found: distinct.len(),
        });
    }
    let edges: Vec<f64> = (1..bins).map(|k| quantile_sorted(&events, k as f64 / bins as f64)).collect();
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SurvivalError::DegenerateEdges(edges));
    }
    let edges = BinEdges { edges };
    Ok((times.iter().map(|&t| edges.bin_of(t)).collect(), edges))
}

/// Hazards and survival probabilities for one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutput {
    pub logits: Vec<f64>,
    pub hazards: Vec<f64>,
    pub survival: Vec<f64>,
}

impl SurvivalOutput {
    pub fn from_logits(logits: &[f64]) -> Self {
        let hazards: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let mut survival = Vec::with_capacity(hazards.len());
        let mut s = 1.0;
        for h in &hazards {
            s *= 1.0 - h;
            survival.push(s);
        }
        Self {
            logits: logits.to_vec(),
            hazards,
            survival,
        }
    }

    /// Higher means riskier: negative summed survival.
    pub fn risk(&self) -> f64 {
        -self.survival.iter().sum::<f64>()
    }
}

/// Survival negative log-likelihood summed over a batch:
/// `−Σ [c·log S(t) + (1 − c)(log S(t − 1) + log h(t))]`, with `S(−1) = 1`
/// and `c = 1` for censored patients.
pub fn nll_survival(outputs: &[SurvivalOutput], labels: &[SurvivalLabel]) -> Result<f64, SurvivalError> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(SurvivalError::Invalid(format!(
            "nll_survival: {} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (out, label) in outputs.iter().zip(labels) {
        let t = label.bin;
        if t >= out.hazards.len() {
            return Err(SurvivalError::Invalid(format!("bin {t} outside [0, {})", out.hazards.len())));
        }
        // log S(b) = Σ_{u≤b} log(1 − h_u) = Σ log σ(−logit_u)
        let log_surv = |b: usize| -> f64 { out.logits[..=b].iter().map(|&l| sigmoid(-l).ln()).sum() };
        total -= if label.censored {
            log_surv(t)
        } else {
            let prev = if t == 0 { 0.0 } else { log_surv(t - 1) };
            prev + sigmoid(out.logits[t]).ln()
        };
    }
    Ok(total)
}

/// Differentiable single-patient survival NLL from a `1 × B` logit row.
pub fn nll_survival_vars(g: &mut Graph, logits: Var, label: &SurvivalLabel) -> Result<Var, SurvivalError> {
    let bins = g.value(logits).len();
    let t = label.bin;
    if t >= bins {
        return Err(SurvivalError::Invalid(format!("bin {t} outside [0, {bins})")));
    }
    let neg = g.neg(logits);
    let keep = g.sigmoid(neg);
    let log_keep = g.log(keep)?;
    let nll = if label.censored {
        let head = g.slice(log_keep, 1, 0, t + 1)?;
        g.sum(head)
    } else {
        let at = g.slice(logits, 1, t, t + 1)?;
        let h = g.sigmoid(at);
        let log_h = g.log(h)?;
        let log_h = g.sum(log_h);
        if t == 0 {
            log_h
        } else {
            let head = g.slice(log_keep, 1, 0, t)?;
            let s = g.sum(head);
            g.add(s, log_h)?
        }
    };
    Ok(g.neg(nll))
}

/// Harrell's concordance index. A pair `(i, j)` is comparable when `i` had
/// the event and `t_i < t_j`; it is concordant when `risk_i > risk_j`, and
/// risk ties count one half.
pub fn c_index(risks: &[f64], labels: &[SurvivalLabel]) -> Result<f64, SurvivalError> {
    if risks.len() != labels.len() {
        return Err(SurvivalError::Invalid(format!(
            "c_index: {} risks for {} labels",
            risks.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..risks.len()).collect();
    order.sort_by(|&a, &b| labels[b].time_months.total_cmp(&labels[a].time_months));

    // risks of patients with strictly later times, kept sorted
    let mut later: Vec<f64> = Vec::with_capacity(risks.len());
    let mut comparable = 0u64;
    let mut score_twice = 0u64;
    let mut start = 0;
    while start < order.len() {
        let t = labels[order[start]].time_months;
        let mut end = start;
        while end < order.len() && labels[order[end]].time_months == t {
            end += 1;
        }
        for &i in &order[start..end] {
            if labels[i].censored {
                continue;
            }
            let below = later.partition_point(|&r| r < risks[i]);
            let not_above = later.partition_point(|&r| r <= risks[i]);
            comparable += later.len() as u64;
            score_twice += 2 * below as u64 + (not_above - below) as u64;
        }
        for &i in &order[start..end] {
            let pos = later.partition_point(|&r| r < risks[i]);
            later.insert(pos, risks[i]);
        }
        start = end;
    }
    if comparable == 0 {
        return Err(SurvivalError::NoComparablePairs);
    }
    Ok(score_twice as f64 / (2 * comparable) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Product-limit survival estimate as a right-continuous step function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    /// Starts at `(0, 1)`; one further point per distinct event time.
    pub points: Vec<KmPoint>,
}

impl KmCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|p| p.time <= t);
        self.points[idx.saturating_sub(1)].survival
    }
}

pub fn km_curve(labels: &[SurvivalLabel]) -> KmCurve {
    let mut sorted: Vec<&SurvivalLabel> = labels.iter().collect();
    sorted.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
    let mut points = vec![KmPoint {
        time: 0.0,
        survival: 1.0,
        at_risk: labels.len(),
        events: 0,
    }];
    let mut s = 1.0;
    let mut at_risk = labels.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].time_months;
        let mut j = i;
        let mut deaths = 0;
        while j < sorted.len() && sorted[j].time_months == t {
            deaths += usize::from(sorted[j].event());
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            points.push(KmPoint {
                time: t,
                survival: s,
                at_risk,
                events: deaths,
            });
        }
        at_risk -= j - i;
        i = j;
    }
    KmCurve { points }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    pub chi_square: f64,
    pub p_value: f64,
}

/// Two-group log-rank test with one degree of freedom.
pub fn logrank_test(group_a: &[SurvivalLabel], group_b: &[SurvivalLabel]) -> Result<LogRank, SurvivalError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(SurvivalError::Invalid("log-rank test needs two non-empty groups".into()));
    }
    let mut times: Vec<f64> = group_a.iter().chain(group_b).filter(|l| l.event()).map(|l| l.time_months).collect();
    if times.is_empty() {
        return Err(SurvivalError::NoEvents);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();

    let count = |g: &[SurvivalLabel], t: f64| -> (f64, f64) {
        let at_risk = g.iter().filter(|l| l.time_months >= t).count() as f64;
        let deaths = g.iter().filter(|l| l.event() && l.time_months == t).count() as f64;
        (at_risk, deaths)
    };
    let (mut observed, mut expected, mut variance) = (0.0, 0.0, 0.0);
    for t in times {
        let (na, da) = count(group_a, t);
        let (nb, db) = count(group_b, t);
        let n = na + nb;
        let d = da + db;
        observed += da;
        expected += d * na / n;
        if n > 1.0 {
            variance += d * (na / n) * (nb / n) * (n - d) / (n - 1.0);
        }
    }
    let diff = observed - expected;
    let chi_square = if variance > 0.0 { diff * diff / variance } else { 0.0 };
    Ok(LogRank {
        chi_square,
        p_value: chi_square_sf(chi_square, 1.0),
    })
}

/// Survival function of the chi-square distribution with `dof` degrees of freedom.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(0.5 * dof, 0.5 * x)
}

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: power series below
/// `x = a + 1`, modified-Lentz continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        1.0 - sum * log_prefactor.exp()
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        log_prefactor.exp() * h
    }
}

/// Splits patients at the median risk. Risks strictly above the median are
/// high-risk; ties go to the low-risk group.
pub fn stratify_median(risks: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    (0..n).partition(|&i| risks[i] > median)
}

/// Writes `time,survival,group` rows for each named curve.
pub fn write_km_csv<W: Write>(mut out: W, curves: &[(&str, &KmCurve)]) -> std::io::Result<()> {
    writeln!(out, "time,survival,group")?;
    for (name, curve) in curves {
        for p in &curve.points {
            writeln!(out, "{},{},{}", p.time, p.survival, name)?;
        }
    }
    Ok(())
}

/// Minimal SVG step plot of one or more KM curves.
pub fn km_svg(curves: &[(&str, &KmCurve)], title: &str) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 4] = ["#c0392b", "#27ae60", "#2980b9", "#8e44ad"];
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.time))
        .fold(1.0f64, f64::max);
    let x = |t: f64| PAD + t / t_max * (W - 2.0 * PAD);
    let y = |s: f64| H - PAD - s * (H - 2.0 * PAD);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
    for (k, (name, curve)) in curves.iter().enumerate() {
        let mut pts = Vec::new();
        let mut prev = 1.0;
        for p in &curve.points {
            pts.push(format!("{:.2},{:.2}", x(p.time), y(prev)));
            pts.push(format!("{:.2},{:.2}", x(p.time), y(p.survival)));
            prev = p.survival;
        }
        pts.push(format!("{:.2},{:.2}", x(t_max), y(prev)));
        let color = COLORS[k % COLORS.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            pts.join(" "),
            W - PAD - 80.0,
            PAD + 16.0 * k as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
