//! Synthetic store × brand panels with known causal parameters.
//!
//! Structural model, for unit i = (store s, brand b) in week t:
//!
//! ```text
//! f   = 5 + income + 0.5·sin(2·income) + 0.4·max(income, 0)
//!         + 0.8·popularity + brand_b + season_t
//! g   = 1 + c·(0.6·income + 0.3·sin(3·income) + 0.7·popularity
//!         + 0.5·brand_b + 0.8·season_t)
//! D   = g + μ
//! Y   = f + (β_own + offset_segment)·D + β_delayed·D_{t−1}
//!         + β_peer·mean(D of the other brands in the store) + ε
//! ```
//!
//! μ and ε are independent Gaussian draws, so E[ε·D | X] = 0 holds exactly.
//! Store-level terms are absorbed by store dummies and the season by time
//! dummies, so a featurized linear first stage is adequate while a plain
//! linear regression on the raw columns is not.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{ColDef, ColType, DataType, IngestOptions, LongTable, PanelDataset, Schema};
use crate::linalg::DeferredQr;

pub const OUTCOME: &str = "sales";
pub const TREATMENT: &str = "price";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("RankDeficient: treatment columns are constant or collinear")]
    RankDeficient,
    #[error("UnknownColumn: {0}")]
    UnknownColumn(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of (store, brand) panel units.
    pub n_units: usize,
    pub n_periods: usize,
    /// Brands per store; the brands of one store are each other's peers.
    pub n_brands: usize,
    pub beta_own: f64,
    pub beta_delayed: f64,
    /// Own-effect offsets of segments g1, g2, ... relative to segment g0.
    pub beta_hetero: Vec<f64>,
    pub beta_peer: f64,
    pub confound_strength: f64,
    pub noise_sd_outcome: f64,
    pub noise_sd_treatment: f64,
    pub seasonality: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_units: 200,
            n_periods: 60,
            n_brands: 3,
            beta_own: -2.0,
            beta_delayed: 0.0,
            beta_hetero: Vec::new(),
            beta_peer: 0.0,
            confound_strength: 1.0,
            noise_sd_outcome: 1.0,
            noise_sd_treatment: 0.5,
            seasonality: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.n_units < 2 {
            return bad("n_units must be at least 2");
        }
        if self.n_periods < 4 {
            return bad("n_periods must be at least 4");
        }
        if self.n_brands == 0 {
            return bad("n_brands must be at least 1");
        }
        if !(self.noise_sd_outcome >= 0.0) || !(self.noise_sd_treatment >= 0.0) {
            return bad("noise standard deviations must be non-negative");
        }
        let coefs = [
            self.beta_own,
            self.beta_delayed,
            self.beta_peer,
            self.confound_strength,
            self.seasonality,
        ];
        if coefs.iter().chain(&self.beta_hetero).any(|v| !v.is_finite()) {
            return bad("coefficients must be finite");
        }
        Ok(())
    }

    pub fn n_segments(&self) -> usize {
        self.beta_hetero.len() + 1
    }

    pub fn n_stores(&self) -> usize {
        self.n_units.div_ceil(self.n_brands)
    }
}

/// Everything needed to recompute the outcome from the generated columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub config: SynthConfig,
    pub brand_effects: Vec<f64>,
    /// Treatment in the burn-in week before the first period, per unit.
    pub burn_in_price: Vec<f64>,
    /// Outcome noise per row in (unit, week) order.
    #[serde(skip)]
    pub epsilon: Vec<f64>,
    /// Treatment noise per row in (unit, week) order.
    #[serde(skip)]
    pub mu: Vec<f64>,
}

/// Seasonal component of week index `t` (0-based; −1 is the burn-in week).
pub fn season(amplitude: f64, t: i64) -> f64 {
    let tf = t as f64;
    let tau = std::f64::consts::TAU;
    let holiday = if t.rem_euclid(52) == 50 { 1.5 } else { 0.0 };
    amplitude * ((tau * tf / 13.0).sin() + 0.5 * (tau * tf / 52.0).cos() + holiday)
}

fn popularity(trend: f64, t: i64, n_periods: usize) -> f64 {
    trend * (2.0 * t as f64 / n_periods as f64 - 1.0)
}

impl TruthRecord {
    /// Outcome confounder term f(X).
    pub fn f(&self, income: f64, popularity: f64, brand: usize, t: i64) -> f64 {
        5.0 + income
            + 0.5 * (2.0 * income).sin()
            + 0.4 * income.max(0.0)
            + 0.8 * popularity
            + self.brand_effects[brand]
            + season(self.config.seasonality, t)
    }

    /// Treatment expectation g(X).
    pub fn g(&self, income: f64, popularity: f64, brand: usize, t: i64) -> f64 {
        let c = self.config.confound_strength;
        1.0 + c
            * (0.6 * income
                + 0.3 * (3.0 * income).sin()
                + 0.7 * popularity
                + 0.5 * self.brand_effects[brand]
                + 0.8 * season(self.config.seasonality, t))
    }

    /// Own treatment effect for a segment index.
    pub fn own_effect(&self, segment: usize) -> f64 {
        self.config.beta_own
            + if segment == 0 {
                0.0
            } else {
                self.config.beta_hetero[segment - 1]
            }
    }

    /// f(X) for every row of a generated dataset, in row order.
    pub fn f_values(&self, ds: &PanelDataset) -> Result<Vec<f64>, SynthError> {
        let cols = Cols::of(ds)?;
        Ok((0..ds.n_rows())
            .map(|r| {
                let t = ds.row_time(r) as i64;
                self.f(cols.income[r], cols.popularity[r], cols.brand(r), t)
            })
            .collect())
    }

    /// Recomputes the outcome of every row from the structural equation,
    /// the stored noise and the dataset's own columns.
    pub fn structural_outcome(&self, ds: &PanelDataset) -> Result<Vec<f64>, SynthError> {
        let cols = Cols::of(ds)?;
        let store = ds.categorical("store").ok_or_else(|| SynthError::UnknownColumn("store".into()))?;
        let segment = ds
            .categorical("segment")
            .ok_or_else(|| SynthError::UnknownColumn("segment".into()))?;
        let seg_levels = ds.levels("segment").unwrap_or(&[]);
        let n_t = ds.n_periods();
        let mut out = Vec::with_capacity(ds.n_rows());
        for r in 0..ds.n_rows() {
            let u = ds.row_unit(r);
            let t = ds.row_time(r) as i64;
            let seg_label = &seg_levels[segment[r].unwrap_or(0) as usize];
            let seg: usize = seg_label.trim_start_matches('g').parse().unwrap_or(0);
            let prev = if t == 0 {
                self.burn_in_price[u]
            } else {
                cols.price[r - 1]
            };
            let peers: Vec<f64> = (0..ds.n_units())
                .filter(|&v| v != u && store[v * n_t] == store[r])
                .map(|v| cols.price[v * n_t + t as usize])
                .collect();
            let peer_mean = if peers.is_empty() {
                0.0
            } else {
                peers.iter().sum::<f64>() / peers.len() as f64
            };
            out.push(
                self.f(cols.income[r], cols.popularity[r], cols.brand(r), t)
                    + self.own_effect(seg) * cols.price[r]
                    + self.config.beta_delayed * prev
                    + self.config.beta_peer * peer_mean
                    + self.epsilon[r],
            );
        }
        Ok(out)
    }
}

struct Cols<'a> {
    income: &'a [f64],
    popularity: &'a [f64],
    price: &'a [f64],
    brand: &'a [Option<u32>],
    brand_index: Vec<usize>,
}

impl<'a> Cols<'a> {
    fn of(ds: &'a PanelDataset) -> Result<Self, SynthError> {
        let num = |c: &str| ds.numeric(c).ok_or_else(|| SynthError::UnknownColumn(c.to_string()));
        let brand = ds.categorical("brand").ok_or_else(|| SynthError::UnknownColumn("brand".into()))?;
        let brand_index = ds
            .levels("brand")
            .unwrap_or(&[])
            .iter()
            .map(|l| l.trim_start_matches('b').parse().unwrap_or(0))
            .collect();
        Ok(Self {
            income: num("income")?,
            popularity: num("popularity")?,
            price: num(TREATMENT)?,
            brand,
            brand_index,
        })
    }

    fn brand(&self, r: usize) -> usize {
        self.brand_index[self.brand[r].unwrap_or(0) as usize]
    }
}

pub fn schema() -> Schema {
    let cols = vec![
        ColDef::new("store", DataType::Categorical),
        ColDef::new("brand", DataType::Categorical),
        ColDef::new("week", DataType::DateTime),
        ColDef::new(OUTCOME, DataType::Numeric).with_role(ColType::Outcome),
        ColDef::new(TREATMENT, DataType::Numeric).with_role(ColType::Treatment),
        ColDef::new("income", DataType::Numeric),
        ColDef::new("segment", DataType::Categorical),
        ColDef::new("popularity", DataType::Numeric),
    ];
    Schema::new(cols, "week", vec!["store".into(), "brand".into()]).expect("static synth schema is valid")
}

fn digits(n: usize) -> usize {
    n.max(1).ilog10() as usize + 1
}

/// Draws one panel. Bit-identical for a fixed config.
pub fn generate(cfg: &SynthConfig) -> Result<(PanelDataset, TruthRecord), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (nu, nt, nb) = (cfg.n_units, cfg.n_periods, cfg.n_brands);
    let n_stores = cfg.n_stores();
    let brand_effects: Vec<f64> = (0..nb)
        .map(|b| if nb == 1 { 0.0 } else { -0.5 + b as f64 / (nb - 1) as f64 })
        .collect();

    let incomes: Vec<f64> = (0..n_stores).map(|_| std_normal.sample(&mut rng)).collect();
    let trends: Vec<f64> = (0..n_stores).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Round-robin keeps the first store in the baseline segment.
    let segments: Vec<usize> = (0..n_stores).map(|s| s % cfg.n_segments()).collect();

    let mut truth = TruthRecord {
        config: cfg.clone(),
        brand_effects,
        burn_in_price: vec![0.0; nu],
        epsilon: Vec::with_capacity(nu * nt),
        mu: Vec::with_capacity(nu * nt),
    };

    // Treatment for t = −1..nt per unit, so the burn-in week feeds the
    // delayed effect of week 0.
    let mut price = vec![vec![0.0; nt + 1]; nu];
    for (u, row) in price.iter_mut().enumerate() {
        let (s, b) = (u / nb, u % nb);
        for (k, d) in row.iter_mut().enumerate() {
            let t = k as i64 - 1;
            let pop = popularity(trends[s], t, nt);
            let mu = cfg.noise_sd_treatment * std_normal.sample(&mut rng);
            if t >= 0 {
                truth.mu.push(mu);
            }
            *d = truth.g(incomes[s], pop, b, t) + mu;
        }
        truth.burn_in_price[u] = row[0];
    }

    // Zero-padded labels keep the dataset's sorted unit order equal to the
    // generation order of the stored noise.
    let (sw, bw) = (digits(n_stores).max(4), digits(nb - 1));
    let mut rows = Vec::with_capacity(nu * nt);
    for u in 0..nu {
        let (s, b) = (u / nb, u % nb);
        let peers: Vec<usize> = (s * nb..((s + 1) * nb).min(nu)).filter(|&v| v != u).collect();
        for t in 0..nt {
            let k = t + 1;
            let pop = popularity(trends[s], t as i64, nt);
            let eps = cfg.noise_sd_outcome * std_normal.sample(&mut rng);
            truth.epsilon.push(eps);
            let peer_mean = if peers.is_empty() {
                0.0
            } else {
                peers.iter().map(|&v| price[v][k]).sum::<f64>() / peers.len() as f64
            };
            let y = truth.f(incomes[s], pop, b, t as i64)
                + truth.own_effect(segments[s]) * price[u][k]
                + cfg.beta_delayed * price[u][k - 1]
                + cfg.beta_peer * peer_mean
                + eps;
            rows.push(vec![
                format!("s{:0sw$}", s + 1),
                format!("b{b:0bw$}"),
                (t + 1).to_string(),
                y.to_string(),
                price[u][k].to_string(),
                incomes[s].to_string(),
                format!("g{}", segments[s]),
                pop.to_string(),
            ]);
        }
    }
    let table = LongTable {
        header: ["store", "brand", "week", OUTCOME, TREATMENT, "income", "segment", "popularity"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows,
    };
    let ds = PanelDataset::from_table(schema(), &IngestOptions::default(), &table)
        .expect("generated table matches its schema");
    Ok((ds, truth))
}

/// OLS of the outcome on the named treatments plus an intercept, with no
/// controls. Returns the slopes.
pub fn naive_ols_baseline(ds: &PanelDataset, treatments: &[&str]) -> Result<Vec<f64>, SynthError> {
    let y = ds
        .numeric(ds.schema().outcome())
        .ok_or_else(|| SynthError::UnknownColumn(ds.schema().outcome().to_string()))?;
    let d = treatments
        .iter()
        .map(|c| ds.numeric(c).ok_or_else(|| SynthError::UnknownColumn(c.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<usize> = (0..ds.n_rows())
        .filter(|&r| !y[r].is_nan() && d.iter().all(|c| !c[r].is_nan()))
        .collect();
    let p = d.len();
    let x = DMatrix::from_fn(rows.len(), p + 1, |i, j| if j == 0 { 1.0 } else { d[j - 1][rows[i]] });
    let qr = DeferredQr::new(&x);
    if qr.rank() < p + 1 || rows.len() <= p + 1 {
        return Err(SynthError::RankDeficient);
    }
    let yv: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
    Ok(qr.solve(&yv)[1..].to_vec())
}
