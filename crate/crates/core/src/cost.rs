//! Inversion cost model.
//!
//! Costs are in abstract complexity units: one unit per multiply-accumulate,
//! so a self-attention layer over `N` tokens of width `d` costs `4Nd² + 2N²d`
//! and a feed-forward layer costs `8Nd²`. LayerNorm, residuals, softmax and
//! the classifier head are not counted.
//!
//! Analytic costs are exact rationals. The runtime [`FlopCounter`] is filled
//! by the transformer forward pass and can be compared against them exactly.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Which analytic term a multiply-accumulate belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostTerm {
    SelfAttention,
    Ffn,
}

/// Per-job multiply-accumulate counter.
///
/// `*_macs` are the products actually executed. `*_cls` hold the share of the
/// CLS token, which the analytic formulas leave out, so the net totals are
/// comparable to costs expressed in patch counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    pub sa_macs: u64,
    pub ffn_macs: u64,
    pub sa_cls: u64,
    pub ffn_cls: u64,
}

impl FlopCounter {
    pub fn record(&mut self, term: CostTerm, macs: u64) {
        match term {
            CostTerm::SelfAttention => self.sa_macs += macs,
            CostTerm::Ffn => self.ffn_macs += macs,
        }
    }

    pub fn exclude(&mut self, term: CostTerm, macs: u64) {
        match term {
            CostTerm::SelfAttention => self.sa_cls += macs,
            CostTerm::Ffn => self.ffn_cls += macs,
        }
    }

    /// Self-attention units attributable to patch tokens.
    pub fn sa(&self) -> u64 {
        self.sa_macs - self.sa_cls
    }

    pub fn ffn(&self) -> u64 {
        self.ffn_macs - self.ffn_cls
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.sa_macs += other.sa_macs;
        self.ffn_macs += other.ffn_macs;
        self.sa_cls += other.sa_cls;
        self.ffn_cls += other.ffn_cls;
    }
}

/// Per-layer self-attention units for `n` tokens of width `d`.
pub fn sa_layer_units(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn ffn_layer_units(n: u64, d: u64) -> u64 {
    8 * n * d * d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CostParams {
    /// Patches per image.
    pub n: u64,
    /// Embedding dimension.
    pub d: u64,
    pub layers: u64,
    pub images: u64,
    pub iterations: u64,
    /// Division factor.
    pub v: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.layers == 0 || self.images == 0 || self.iterations == 0 {
            return Err(Error::contract(format!("cost parameters must be positive: {self:?}")));
        }
        if self.v == 0 {
            return Err(Error::contract("division factor must be positive"));
        }
        Ok(())
    }

    fn require_division(&self) -> Result<()> {
        self.validate()?;
        if self.v < 2 {
            return Err(Error::contract(format!("division factor must be >= 2, got {}", self.v)));
        }
        Ok(())
    }
}

fn int(x: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(x))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MethodCost {
    pub sa: BigRational,
    pub ffn: BigRational,
}

impl MethodCost {
    pub fn total(&self) -> BigRational {
        &self.sa + &self.ffn
    }
}

/// Dense inversion: every patch for every iteration.
pub fn cost_dmi(p: &CostParams) -> Result<MethodCost> {
    p.validate()?;
    let (n, d) = (int(p.n), int(p.d));
    let lit = int(p.layers) * int(p.images) * int(p.iterations);
    let sa = &lit * (int(4) * &n * &d * &d + int(2) * &n * &n * &d);
    let ffn = lit * int(8) * &n * &d * &d;
    Ok(MethodCost { sa, ffn })
}

/// Idealised sparse inversion: `N/v` patches from the first iteration.
pub fn cost_smi_star(p: &CostParams) -> Result<MethodCost> {
    p.validate()?;
    let (n, d, v) = (int(p.n), int(p.d), int(p.v));
    let lit = int(p.layers) * int(p.images) * int(p.iterations);
    let sa = &lit * (int(4) * &n * &d * &d / &v + int(2) * &n * &n * &d / (&v * &v));
    let ffn = lit * int(8) * &n * &d * &d / v;
    Ok(MethodCost { sa, ffn })
}

/// Progressive detachment, closed form of the stage sum.
pub fn cost_pri(p: &CostParams) -> Result<MethodCost> {
    p.require_division()?;
    let (n, d, v) = (int(p.n), int(p.d), int(p.v));
    let lit = int(p.layers) * int(p.images) * int(p.iterations);
    let v1 = &v + BigRational::one();
    let v2 = &v * &v;
    let v3 = &v2 * &v;
    let sa = &lit
        * (int(4) * &n * &d * &d * &v1 / (int(2) * &v2)
            + int(2) * &n * &n * &d * &v1 * (int(2) * &v + BigRational::one()) / (int(6) * &v3));
    let ffn = lit * int(4) * &n * &d * &d * v1 / v2;
    Ok(MethodCost { sa, ffn })
}

/// `6v(v−1)/(2v²−3v+1)`: the self-attention ordering holds iff `N/d` is
/// strictly below this.
pub fn sa_bound_factor(v: u64) -> Result<BigRational> {
    if v < 2 {
        return Err(Error::contract(format!("division factor must be >= 2, got {v}")));
    }
    let v = int(v);
    let num = int(6) * &v * (&v - BigRational::one());
    let den = int(2) * &v * &v - int(3) * &v + BigRational::one();
    Ok(num / den)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OrderingVerdict {
    /// Bound on `N` (that is, factor × d).
    pub sa_bound: Exact,
    pub n_below_bound: bool,
    /// `C_PRI^SA < C_SMI*^SA < C_DMI^SA`.
    pub sa_ordering: bool,
    /// `C_PRI^FFN < C_SMI*^FFN < C_DMI^FFN`.
    pub ffn_ordering: bool,
    /// Legacy condition `N/d < 3`.
    pub n_below_3d: bool,
}

pub fn verify_ordering(p: &CostParams) -> Result<OrderingVerdict> {
    p.require_division()?;
    let dmi = cost_dmi(p)?;
    let smi = cost_smi_star(p)?;
    let pri = cost_pri(p)?;
    let bound = sa_bound_factor(p.v)? * int(p.d);
    Ok(OrderingVerdict {
        n_below_bound: int(p.n) < bound,
        sa_bound: Exact(bound),
        sa_ordering: pri.sa < smi.sa && smi.sa < dmi.sa,
        ffn_ordering: pri.ffn < smi.ffn && smi.ffn < dmi.ffn,
        n_below_3d: p.n < 3 * p.d,
    })
}

/// A rational serialised as `{"exact": "p/q", "value": f64}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exact(pub BigRational);

impl Exact {
    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl std::fmt::Display for Exact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.denom().is_one() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Exact", 2)?;
        st.serialize_field("exact", &self.to_string())?;
        st.serialize_field("value", &self.to_f64())?;
        st.end()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostEntry {
    pub method: &'static str,
    pub sa: Exact,
    pub ffn: Exact,
    pub total: Exact,
}

impl CostEntry {
    fn new(method: &'static str, c: &MethodCost) -> Self {
        Self {
            method,
            sa: Exact(c.sa.clone()),
            ffn: Exact(c.ffn.clone()),
            total: Exact(c.total()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostRatios {
    pub pri_over_smi_star_ffn: Exact,
    pub pri_over_smi_star_sa: Exact,
    pub dmi_over_smi_star_ffn: Exact,
    pub dmi_over_pri_total: Exact,
}

/// Counter totals from an instrumented run. Forward units are measured;
/// the forward+backward figures apply the convention backward = 2 × forward.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MeasuredCost {
    pub method: String,
    pub sa_forward: u64,
    pub ffn_forward: u64,
    pub sa_forward_backward: u64,
    pub ffn_forward_backward: u64,
    /// Forward passes used only to score patches (not part of the totals).
    pub scoring_sa: u64,
    pub scoring_ffn: u64,
}

impl MeasuredCost {
    pub fn from_counters(method: &str, inversion: &FlopCounter, scoring: &FlopCounter) -> Self {
        Self {
            method: method.to_string(),
            sa_forward: inversion.sa(),
            ffn_forward: inversion.ffn(),
            sa_forward_backward: 3 * inversion.sa(),
            ffn_forward_backward: 3 * inversion.ffn(),
            scoring_sa: scoring.sa(),
            scoring_ffn: scoring.ffn(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub params: CostParams,
    pub unit: &'static str,
    pub methods: Vec<CostEntry>,
    pub ratios: CostRatios,
    pub ordering: OrderingVerdict,
    pub measured: Vec<MeasuredCost>,
}

impl CostReport {
    pub fn new(p: &CostParams) -> Result<Self> {
        let dmi = cost_dmi(p)?;
        let smi = cost_smi_star(p)?;
        let pri = cost_pri(p)?;
        let ratios = CostRatios {
            pri_over_smi_star_ffn: Exact(&pri.ffn / &smi.ffn),
            pri_over_smi_star_sa: Exact(&pri.sa / &smi.sa),
            dmi_over_smi_star_ffn: Exact(&dmi.ffn / &smi.ffn),
            dmi_over_pri_total: Exact(dmi.total() / pri.total()),
        };
        Ok(Self {
            params: *p,
            unit: "multiply-accumulate (4Nd^2+2N^2d per SA layer, 8Nd^2 per FFN layer)",
            methods: vec![
                CostEntry::new("DMI", &dmi),
                CostEntry::new("SMI*", &smi),
                CostEntry::new("PRI", &pri),
            ],
            ratios,
            ordering: verify_ordering(p)?,
            measured: Vec::new(),
        })
    }

    pub fn with_measured(mut self, measured: Vec<MeasuredCost>) -> Self {
        self.measured = measured;
        self
    }

    pub fn to_table(&self) -> String {
        let p = &self.params;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "N={} d={} L={} I={} T={} v={}",
            p.n, p.d, p.layers, p.images, p.iterations, p.v
        );
        let _ = writeln!(out, "{:<8} {:>22} {:>22} {:>22}", "method", "SA", "FFN", "total");
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<8} {:>22.1} {:>22.1} {:>22.1}",
                m.method,
                m.sa.to_f64(),
                m.ffn.to_f64(),
                m.total.to_f64()
            );
        }
        let _ = writeln!(out, "PRI/SMI* FFN ratio  {}", self.ratios.pri_over_smi_star_ffn);
        let _ = writeln!(out, "PRI/SMI* SA ratio   {:.6}", self.ratios.pri_over_smi_star_sa.to_f64());
        let _ = writeln!(
            out,
            "SA bound N < {:.4} ({}): {}",
            self.ordering.sa_bound.to_f64(),
            if self.ordering.n_below_bound { "satisfied" } else { "violated" },
            if self.ordering.sa_ordering { "PRI < SMI* < DMI" } else { "ordering fails" }
        );
        let _ = writeln!(
            out,
            "FFN ordering: {}",
            if self.ordering.ffn_ordering { "PRI < SMI* < DMI" } else { "ordering fails" }
        );
        for m in &self.measured {
            let _ = writeln!(
                out,
                "measured {:<6} SA fwd {:>16} FFN fwd {:>16}",
                m.method, m.sa_forward, m.ffn_forward
            );
        }
        out
    }
}
