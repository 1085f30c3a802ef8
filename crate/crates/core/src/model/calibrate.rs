//! Search for block policies, per-stage widths, stem and head sizes that
//! reproduce a table of reference parameter counts.
//!
//! For a fixed policy and fixed widths, the parameter count is affine in the
//! stem filter count and in the hidden head width, and quadratic in `k` with
//! a leading coefficient that depends only on the policy and widths. The
//! search exploits both facts: width tuples are screened on the leading
//! coefficient, then stem and head are solved per tuple. Policies are
//! screened on the shallowest family with the most targets before the
//! remaining families are searched.

use std::collections::BTreeMap;
use std::fmt;

use super::summary::total_params;
use super::{ArchConfig, Head};
use crate::block::BlockPolicy;
use crate::error::{Error, Result};

/// `(d, k) → total parameters`.
pub type Targets = BTreeMap<(usize, usize), usize>;

/// Reference parameter counts for every WATT-EffNet variant.
pub fn reference_param_counts() -> Targets {
    [
        ((1, 2), 8_501),
        ((1, 3), 13_693),
        ((1, 4), 19_909),
        ((1, 5), 27_149),
        ((1, 6), 35_413),
        ((1, 7), 44_701),
        ((3, 2), 106_629),
        ((3, 3), 205_673),
        ((3, 4), 335_693),
        ((3, 5), 496_689),
        ((3, 6), 688_661),
        ((3, 7), 911_609),
        ((5, 2), 371_493),
        ((5, 3), 720_233),
    ]
    .into_iter()
    .collect()
}

/// Bounds of the calibration grammar.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub policies: Vec<BlockPolicy>,
    pub max_width: usize,
    pub max_stem: usize,
    pub max_head: usize,
    /// Policies kept after screening when none fits the screening family exactly.
    pub keep_inexact: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let mut policies = Vec::new();
        let ratios = [2, 4, 8, 16];
        for conv_bias in [false, true] {
            for se_ratio in ratios {
                for se_bias in [false, true] {
                    for attention_reduction in ratios {
                        for attention_bias in [false, true] {
                            for spatial_bias in [false, true] {
                                for projection_skip in [false, true] {
                                    policies.push(BlockPolicy {
                                        conv_bias,
                                        se_ratio,
                                        se_bias,
                                        attention_reduction,
                                        attention_bias,
                                        spatial_bias,
                                        projection_skip,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        SearchSpace {
            policies,
            max_width: 96,
            max_stem: 128,
            max_head: 2048,
            keep_inexact: 4,
        }
    }
}

/// Best configuration found for one depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FamilyFit {
    pub d: usize,
    pub base_widths: Vec<usize>,
    pub stem_filters: usize,
    pub head: Head,
    /// `(k, target, achieved)`.
    pub rows: Vec<(usize, usize, usize)>,
}

impl FamilyFit {
    pub fn exact(&self) -> bool {
        self.rows.iter().all(|&(_, t, g)| t == g)
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.rows
            .iter()
            .map(|&(_, t, g)| (g as f64 - t as f64).abs() / t as f64)
            .fold(0.0, f64::max)
    }

    fn abs_dev(&self) -> u64 {
        self.rows
            .iter()
            .map(|&(_, t, g)| t.abs_diff(g) as u64)
            .sum()
    }

    /// Configuration reproducing this fit for a given `k`.
    pub fn config(&self, policy: BlockPolicy, k: usize) -> ArchConfig {
        ArchConfig {
            d: self.d,
            k,
            attention: true,
            input_shape: [224, 224, 3],
            num_classes: 5,
            base_widths: self.base_widths.clone(),
            stem_filters: self.stem_filters,
            head: self.head,
            policy,
            strict_budget: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub policy: BlockPolicy,
    pub fits: Vec<FamilyFit>,
}

impl CalibrationReport {
    pub fn exact(&self) -> bool {
        self.fits.iter().all(FamilyFit::exact)
    }

    pub fn max_rel_dev(&self) -> f64 {
        self.fits
            .iter()
            .map(FamilyFit::max_rel_dev)
            .fold(0.0, f64::max)
    }

    fn score(&self) -> (usize, f64, u64) {
        let exact = self.fits.iter().filter(|f| f.exact()).count();
        (
            exact,
            self.max_rel_dev(),
            self.fits.iter().map(FamilyFit::abs_dev).sum(),
        )
    }

    fn better_than(&self, other: &CalibrationReport) -> bool {
        let (a, b) = (self.score(), other.score());
        a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "policy: {:?}", self.policy)?;
        for fit in &self.fits {
            writeln!(
                f,
                "d={}: base_widths={:?} stem={} head={:?}",
                fit.d, fit.base_widths, fit.stem_filters, fit.head
            )?;
        }
        writeln!(
            f,
            "{:>3} {:>3} {:>10} {:>10} {:>8} {:>9}",
            "d", "k", "target", "got", "delta", "rel"
        )?;
        for fit in &self.fits {
            for &(k, t, g) in &fit.rows {
                let delta = g as i64 - t as i64;
                writeln!(
                    f,
                    "{:>3} {:>3} {:>10} {:>10} {:>8} {:>8.4}%",
                    fit.d,
                    k,
                    t,
                    g,
                    delta,
                    100.0 * delta as f64 / t as f64
                )?;
            }
        }
        write!(
            f,
            "max relative deviation: {:.4}%",
            100.0 * self.max_rel_dev()
        )
    }
}

/// Find the best configuration under one policy for depth `d`.
pub fn search_family(
    policy: BlockPolicy,
    d: usize,
    targets: &BTreeMap<usize, usize>,
    space: &SearchSpace,
) -> Option<FamilyFit> {
    let ks: Vec<usize> = targets.keys().copied().collect();
    let ts: Vec<i64> = targets.values().map(|&v| v as i64).collect();
    if ks.is_empty() || d == 0 {
        return None;
    }
    let step = width_step(&policy, &ks);
    let domain: Vec<usize> = (step..=space.max_width).step_by(step).collect();
    let mut probe = FamilyFit {
        d,
        base_widths: vec![step; d],
        stem_filters: 1,
        head: Head::Dense,
        rows: Vec::new(),
    }
    .config(policy, 1);

    let lead = (ks.len() >= 3)
        .then(|| leading_coefficient(&ks, &ts))
        .flatten();
    let mut best: Option<(f64, u64, FamilyFit)> = None;
    for filter in [true, false] {
        let mut idx = vec![0usize; d];
        loop {
            probe.base_widths = idx.iter().map(|&i| domain[i]).collect();
            let passes = match (filter, lead) {
                (true, Some(target)) => {
                    model_leading(&mut probe).is_some_and(|a| a * target.1 == target.0)
                }
                (true, None) => true,
                (false, _) => true,
            };
            if passes {
                if let Some(fit) = solve_widths(&mut probe, &ks, &ts, space) {
                    let score = (fit.max_rel_dev(), fit.abs_dev());
                    if best
                        .as_ref()
                        .is_none_or(|b| score.0 < b.0 || (score.0 == b.0 && score.1 < b.1))
                    {
                        best = Some((score.0, score.1, fit));
                    }
                }
            }
            if !next_nondecreasing(&mut idx, domain.len()) {
                break;
            }
        }
        if best.is_some() || lead.is_none() {
            break;
        }
    }
    best.map(|b| b.2)
}

/// Width granularity that keeps every reduction ratio integral for all `ks`.
fn width_step(p: &BlockPolicy, ks: &[usize]) -> usize {
    let l = lcm(p.se_ratio.max(1), p.attention_reduction.max(1));
    let g = ks.iter().fold(0, |a, &k| gcd(a, k));
    l / gcd(l, g.max(1))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Second divided difference of the first three targets, as `(num, den)`.
fn leading_coefficient(ks: &[usize], ts: &[i64]) -> Option<(i128, i128)> {
    let (k1, k2, k3) = (ks[0] as i128, ks[1] as i128, ks[2] as i128);
    let (y1, y2, y3) = (ts[0] as i128, ts[1] as i128, ts[2] as i128);
    // ((y3-y2)/(k3-k2) - (y2-y1)/(k2-k1)) / (k3-k1)
    let num = (y3 - y2) * (k2 - k1) - (y2 - y1) * (k3 - k2);
    let den = (k3 - k2) * (k2 - k1) * (k3 - k1);
    (den != 0).then_some((num, den))
}

fn count_at(cfg: &mut ArchConfig, k: usize, stem: usize, head: Head) -> Option<i64> {
    cfg.k = k;
    cfg.stem_filters = stem;
    cfg.head = head;
    total_params(cfg).map(|v| v as i64)
}

/// Leading coefficient in `k` of the model count (independent of stem and head).
fn model_leading(cfg: &mut ArchConfig) -> Option<i128> {
    let c: Option<Vec<i64>> = (1..=3).map(|k| count_at(cfg, k, 1, Head::Dense)).collect();
    let c = c?;
    Some(((c[2] - 2 * c[1] + c[0]) / 2) as i128)
}

fn solve_widths(
    cfg: &mut ArchConfig,
    ks: &[usize],
    ts: &[i64],
    space: &SearchSpace,
) -> Option<FamilyFit> {
    // count_k(s, H) = base_k + s·a_k + H·b_k
    let mut base = Vec::with_capacity(ks.len());
    let mut a = Vec::with_capacity(ks.len());
    let mut b = Vec::with_capacity(ks.len());
    for &k in ks {
        let c00 = count_at(cfg, k, 0, Head::Hidden(0))?;
        a.push(count_at(cfg, k, 1, Head::Hidden(0))? - c00);
        b.push(count_at(cfg, k, 0, Head::Hidden(1))? - c00);
        base.push(c00);
    }
    let dense_shift: Vec<i64> = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| count_at(cfg, k, 0, Head::Dense).map(|c| c - base[i]))
        .collect::<Option<_>>()?;
    let dev = |got: &dyn Fn(usize) -> i64| -> (f64, u64) {
        let mut m: f64 = 0.0;
        let mut s = 0u64;
        for (i, &t) in ts.iter().enumerate() {
            let g = got(i);
            m = m.max((g - t).abs() as f64 / t as f64);
            s += (g - t).unsigned_abs();
        }
        (m, s)
    };
    let mut best: Option<((f64, u64), usize, Head)> = None;
    let mut consider = |score: (f64, u64), s: usize, h: Head| {
        if best
            .as_ref()
            .is_none_or(|(b, _, _)| score.0 < b.0 || (score.0 == b.0 && score.1 < b.1))
        {
            best = Some((score, s, h));
        }
    };
    for s in 1..=space.max_stem {
        let si = s as i64;
        consider(
            dev(&|i| base[i] + si * a[i] + dense_shift[i]),
            s,
            Head::Dense,
        );
        // deviation is convex in H; scan the bracket spanned by per-k exact solutions
        let hstar: Vec<f64> = (0..ks.len())
            .map(|i| (ts[i] - base[i] - si * a[i]) as f64 / b[i] as f64)
            .collect();
        let lo = hstar
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
            .floor()
            .max(1.0) as i64;
        let hi = hstar
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
            .ceil()
            .min(space.max_head as f64) as i64;
        if hi < lo {
            continue;
        }
        let eval = |h: i64| dev(&|i| base[i] + si * a[i] + h * b[i]);
        let (mut l, mut r) = (lo, hi);
        while r - l > 2 {
            let m1 = l + (r - l) / 3;
            let m2 = r - (r - l) / 3;
            if eval(m1) <= eval(m2) {
                r = m2;
            } else {
                l = m1;
            }
        }
        for h in l..=r {
            consider(eval(h), s, Head::Hidden(h as usize));
        }
    }
    let (_, s, head) = best?;
    let rows = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let got = count_at(cfg, k, s, head).unwrap_or(0);
            (k, ts[i] as usize, got as usize)
        })
        .collect();
    Some(FamilyFit {
        d: cfg.d,
        base_widths: cfg.base_widths.clone(),
        stem_filters: s,
        head,
        rows,
    })
}

fn next_nondecreasing(idx: &mut [usize], n: usize) -> bool {
    let mut i = idx.len();
    while i > 0 {
        i -= 1;
        if idx[i] + 1 < n {
            let v = idx[i] + 1;
            for j in idx.iter_mut().skip(i) {
                *j = v;
            }
            return true;
        }
    }
    false
}

fn families(targets: &Targets) -> BTreeMap<usize, BTreeMap<usize, usize>> {
    let mut fam: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&(d, k), &v) in targets {
        fam.entry(d).or_default().insert(k, v);
    }
    fam
}

/// Best report over the search space, exact or not.
pub fn search_best(targets: &Targets, space: &SearchSpace) -> Option<CalibrationReport> {
    let fam = families(targets);
    let (&screen_d, screen_t) = fam
        .iter()
        .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(a.0)))?;
    let mut screened: Vec<(BlockPolicy, FamilyFit)> = space
        .policies
        .iter()
        .filter_map(|&p| search_family(p, screen_d, screen_t, space).map(|f| (p, f)))
        .collect();
    screened.sort_by(|a, b| a.1.max_rel_dev().total_cmp(&b.1.max_rel_dev()));
    let exact = screened.iter().filter(|(_, f)| f.exact()).count();
    screened.truncate(if exact > 0 { exact } else { space.keep_inexact });
    log::info!(
        "calibration: {} policies survive screening on d={screen_d}",
        screened.len()
    );

    let mut best: Option<CalibrationReport> = None;
    for (policy, first) in screened {
        let mut fits = Vec::with_capacity(fam.len());
        for (&d, t) in &fam {
            if d == screen_d {
                fits.push(first.clone());
            } else if let Some(f) = search_family(policy, d, t, space) {
                fits.push(f);
            }
        }
        if fits.len() != fam.len() {
            continue;
        }
        let report = CalibrationReport { policy, fits };
        if best.as_ref().is_none_or(|b| report.better_than(b)) {
            best = Some(report);
        }
    }
    best
}

/// Calibrate against `targets`. Returns the report only when every target is
/// matched exactly; otherwise fails with the best-achievable delta table.
pub fn calibrate_base_widths(targets: &Targets, space: &SearchSpace) -> Result<CalibrationReport> {
    let report = search_best(targets, space).ok_or_else(|| {
        Error::Calibration("no buildable configuration in the search space".into())
    })?;
    if report.exact() {
        Ok(report)
    } else {
        Err(Error::Calibration(report.to_string()))
    }
}
