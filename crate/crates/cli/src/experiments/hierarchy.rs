//! `hierarchy-certify`: Yule semigroup moment bounds and the comparison lemma.

use anyhow::Result;
use rayon::prelude::*;

use chaoslab_core::hierarchy::{self, CertifyCase, Forcing, YuleGenerator};
use chaoslab_core::table::Table;

use crate::config::{ExperimentConfig, ForcingSpec, LemmaSection, MomentSection};
use crate::{fmt_full, fmt_short, Check, Outcome};

const MOMENTS: &str = "Yule semigroup moment bounds";
const LEMMA: &str = "hierarchy comparison lemma";

/// Slack on `f_T / bound` for the RK4 solution of the equality system.
pub const LEMMA_SLACK: f64 = 1e-9;
/// Relative tolerance on `e^{tG} m_1(1)` against `e^{at}`.
pub const LEVEL_ONE_TOLERANCE: f64 = 1e-6;

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome::default();
    let section = cfg.hierarchy.as_ref();
    if let Some(m) = section.and_then(|h| h.moments.as_ref()) {
        moments(m, &mut out)?;
    }
    if let Some(l) = section.and_then(|h| h.lemma.as_ref()) {
        lemma(l, &mut out)?;
    }
    if out.checks.is_empty() {
        out.notices.push("no `hierarchy.moments` or `hierarchy.lemma` section; nothing checked".into());
    }
    Ok(out)
}

fn moments(m: &MomentSection, out: &mut Outcome) -> Result<()> {
    let gen = YuleGenerator::new(m.n, m.a)?;
    let mut table = Table::new(&["q", "max_ratio", "violations", "uncapped_violations", "order_violations"]);
    for &q in &m.q_grid {
        let r = hierarchy::check_moment_bounds(&gen, &m.t_grid, q)?;
        table.push(vec![
            q.to_string(),
            fmt_full(r.max_ratio),
            r.violations.to_string(),
            r.uncapped_violations.to_string(),
            r.order_violations.to_string(),
        ]);
        out.checks.push(Check::new(
            MOMENTS,
            format!("e^{{tG}} m_{q} <= 8 e^{{{q}at}} m_{q} at n={}, a={}", m.n, m.a),
            r.pass(),
            format!(
                "{} violations, max ratio {}, {} uncapped-growth violations, {} order violations",
                r.violations,
                fmt_short(r.max_ratio),
                r.uncapped_violations,
                r.order_violations
            ),
        ));
    }
    let t = m.t_grid.iter().copied().fold(0.0, f64::max);
    let level = hierarchy::semigroup_apply(&gen, &hierarchy::power_vector(m.n, 1.0), t)?;
    let growth = (m.a * t).exp();
    let rel = (level[0] - growth).abs() / growth;
    out.checks.push(Check::new(
        MOMENTS,
        format!("e^{{tG}} m_1(1) = e^{{at}} at t={t}"),
        rel <= LEVEL_ONE_TOLERANCE,
        format!("relative error {} (tolerance {LEVEL_ONE_TOLERANCE:e})", fmt_short(rel)),
    ));
    out.tables.push(("moments.csv".into(), table));
    Ok(())
}

fn lemma(l: &LemmaSection, out: &mut Outcome) -> Result<()> {
    let mut cases = Vec::new();
    for &n in &l.n_grid {
        for &a in &l.a_grid {
            for &c in &l.c_grid {
                for &p in &l.p_grid {
                    for &f in &l.forcing {
                        let forcing = match f {
                            ForcingSpec::Zero => Forcing::Zero,
                            ForcingSpec::InverseSquare => Forcing::InverseSquare { scale: 1.0 },
                        };
                        cases.push(CertifyCase { n, a, b: l.b, c, p, c0: l.c0, t_end: l.t_end, forcing });
                    }
                }
            }
        }
    }
    let outcomes = cases.par_iter().map(hierarchy::certify).collect::<chaoslab_core::Result<Vec<_>>>()?;
    let mut detail = Table::new(&["n", "a", "c", "p", "forcing", "k", "f_T", "lemma_rhs", "ratio"]);
    let mut summary = Table::new(&["n", "a", "c", "p", "forcing", "max_ratio"]);
    for o in &outcomes {
        let c = &o.case;
        let prefix = vec![c.n.to_string(), fmt_full(c.a), fmt_full(c.c), c.p.to_string(), c.forcing.label()];
        for row in hierarchy::lemma_table(o).rows {
            let mut r = prefix.clone();
            r.extend(row);
            detail.push(r);
        }
        let mut s = prefix;
        s.push(fmt_full(o.report.max_ratio));
        summary.push(s);
        out.checks.push(Check::new(
            LEMMA,
            format!("n={}, a={}, c={}, p={}, R={}, T={}", c.n, c.a, c.c, c.p, c.forcing.label(), c.t_end),
            o.report.max_ratio <= 1.0 + LEMMA_SLACK,
            format!("max_k f_T(k) / bound(k) = {}", fmt_short(o.report.max_ratio)),
        ));
    }
    out.tables.push(("lemma.csv".into(), detail));
    out.tables.push(("lemma_summary.csv".into(), summary));
    Ok(())
}
