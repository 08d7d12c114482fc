//! Second-stage design: columns built from residualized core treatments by
//! interactions, lags and peer averaging.
//!
//! Every column is a residualized treatment series times a multiplier known
//! at the reference date (an indicator or a peer weight), possibly re-indexed
//! in time or across units. No column needs a first stage of its own.
//!
//! Lead pairing: a row of the second stage is an outcome residual at lead
//! `τ_y`. An own effect with lag `ℓ` pairs it with the treatment residual of
//! the same reference date at lead `τ_d = τ_y − ℓ`, i.e. the treatment
//! surprise dated `ℓ` periods before the outcome date. When only one lead is
//! fitted the lagged surprise is taken from reference date `t − ℓ` instead.
//! With several leads every pairing gets its own coefficient, suffixed
//! `@τ_y`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{DataType, LongTable, PanelDataset, Schema};
use crate::design::{DesignMatrix, RowKey};
use crate::residuals::ResidualPanel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreatmentError {
    #[error("EmptyBuilders: no treatment builders")]
    EmptyBuilders,
    #[error("UnknownTreatment: '{0}' is not a declared treatment column")]
    UnknownTreatment(String),
    #[error("InvalidInteraction: '{col}' {reason}")]
    InvalidInteraction { col: String, reason: String },
    #[error("UnknownGroupColumn: '{0}' is not a panel column")]
    UnknownGroupColumn(String),
    #[error("UnknownLevel: '{level}' is not a level of '{col}'")]
    UnknownLevel { col: String, level: String },
    #[error("SelfPeer: level '{0}' lists itself as a peer")]
    SelfPeer(String),
    #[error("MissingResidual: no residuals for '{core}' at lead {lead}")]
    MissingResidual { core: String, lead: usize },
    #[error("LagOutOfRange: lag {lag} of '{treatment}' pairs with no fitted lead")]
    LagOutOfRange { treatment: String, lag: usize },
    #[error("DuplicateColumn: '{0}'")]
    DuplicateColumn(String),
    #[error("NoUsableRows: every second-stage row lacks a component")]
    NoUsableRows,
}

type Result<T> = std::result::Result<T, TreatmentError>;

#[derive(Debug, Clone, PartialEq)]
pub struct OwnVar {
    pub treatment: String,
    pub lag: usize,
    /// Interaction groups; each group interacts with the full cross of its
    /// members' levels.
    pub interaction_levels: Vec<Vec<String>>,
    /// Overrides the default penalization of every column of this builder.
    pub penalized: Option<bool>,
}

impl OwnVar {
    pub fn new(treatment: impl Into<String>) -> Self {
        Self {
            treatment: treatment.into(),
            lag: 0,
            interaction_levels: Vec::new(),
            penalized: None,
        }
    }

    pub fn lag(mut self, lag: usize) -> Self {
        self.lag = lag;
        self
    }

    pub fn interactions(mut self, groups: Vec<Vec<String>>) -> Self {
        self.interaction_levels = groups;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PToPVar {
    pub treatment: String,
    /// Panel column along which peers differ; peers share every other key.
    pub group_col: String,
    pub peer_map: BTreeMap<String, Vec<String>>,
    /// One column per focal level instead of a single pooled column.
    pub by_focal: bool,
    pub penalized: Option<bool>,
}

impl PToPVar {
    pub fn new(
        treatment: impl Into<String>,
        group_col: impl Into<String>,
        peer_map: BTreeMap<String, Vec<String>>,
    ) -> Self {
        Self {
            treatment: treatment.into(),
            group_col: group_col.into(),
            peer_map,
            by_focal: false,
            penalized: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreatmentBuilder {
    Own(OwnVar),
    Peer(PToPVar),
}

impl TreatmentBuilder {
    pub fn treatment(&self) -> &str {
        match self {
            TreatmentBuilder::Own(o) => &o.treatment,
            TreatmentBuilder::Peer(p) => &p.treatment,
        }
    }
}

/// `(treatment, lag)` pairs the builders draw on.
pub fn core_treatment_set(
    builders: &[TreatmentBuilder],
    schema: &Schema,
) -> Result<BTreeSet<(String, usize)>> {
    if builders.is_empty() {
        return Err(TreatmentError::EmptyBuilders);
    }
    let declared = schema.treatments();
    let mut out = BTreeSet::new();
    for b in builders {
        let t = b.treatment();
        if !declared.contains(&t) {
            return Err(TreatmentError::UnknownTreatment(t.to_string()));
        }
        let lag = match b {
            TreatmentBuilder::Own(o) => o.lag,
            TreatmentBuilder::Peer(_) => 0,
        };
        out.insert((t.to_string(), lag));
    }
    Ok(out)
}

/// Treatments that need a first-stage model; lags reuse the lag-0 model.
pub fn model_set(builders: &[TreatmentBuilder], schema: &Schema) -> Result<BTreeSet<String>> {
    Ok(core_treatment_set(builders, schema)?
        .into_iter()
        .map(|(t, _)| t)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Main,
    /// Indicator of one cell of an interaction group, as (column, level).
    Interaction { cell: Vec<(String, String)> },
    /// Peer mean; `focal` set when split by focal level.
    Peer { group_col: String, focal: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub builder: usize,
    pub treatment: String,
    pub lag: usize,
    pub kind: ColumnKind,
    /// Lead of the treatment residual and of the outcome residual.
    pub tau_d: usize,
    pub tau_y: usize,
    /// Reference-date offset of the treatment residual (single-lead lags).
    pub ref_shift: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone)]
pub struct CausalDesign {
    pub z: DesignMatrix,
    /// Residualized outcome.
    pub y: Vec<f64>,
    pub meta: Vec<ColumnMeta>,
    pub excluded: usize,
}

impl CausalDesign {
    /// `(unit keys..., time, lead, outcome_residual, columns...)`.
    pub fn to_long_table(&self, ds: &PanelDataset, fmt: impl Fn(f64) -> String) -> LongTable {
        let schema = ds.schema();
        let mut header: Vec<String> = schema.panel_colnames().to_vec();
        header.push(schema.time_colname().to_string());
        header.push("lead".into());
        header.push("outcome_residual".into());
        header.extend(self.z.names.iter().cloned());
        let rows = (0..self.z.nrows())
            .map(|i| {
                let k = self.z.keys[i];
                let mut r: Vec<String> =
                    ds.unit_key(k.unit as usize).into_iter().map(String::from).collect();
                r.push(ds.time_label(k.time as usize));
                r.push(k.lead.to_string());
                r.push(fmt(self.y[i]));
                r.extend((0..self.z.ncols()).map(|j| fmt(self.z.x[(i, j)])));
                r
            })
            .collect();
        LongTable { header, rows }
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("serializable")
    }

    pub fn penalized_names(&self) -> Vec<String> {
        self.meta
            .iter()
            .filter(|m| m.penalized)
            .map(|m| m.name.clone())
            .collect()
    }

    pub fn unpenalized_names(&self) -> Vec<String> {
        self.meta
            .iter()
            .filter(|m| !m.penalized)
            .map(|m| m.name.clone())
            .collect()
    }
}

/// Source of one interaction member's level at a reference row.
enum Member<'a> {
    Panel { pos: usize },
    Categorical(&'a [Option<u32>]),
    Binary(&'a [f64]),
}

struct Group<'a> {
    members: Vec<Member<'a>>,
    /// Level names per member.
    levels: Vec<Vec<String>>,
    names: Vec<String>,
}

impl Group<'_> {
    fn n_cells(&self) -> usize {
        self.levels.iter().map(|l| l.len()).product()
    }

    /// Cell index of (unit, reference row), `None` when a level is missing.
    fn cell(&self, ds: &PanelDataset, unit: usize, row: usize) -> Option<usize> {
        let mut idx = 0;
        for (m, lv) in self.members.iter().zip(&self.levels) {
            let code = match m {
                Member::Panel { pos } => ds.unit_codes(unit)[*pos] as usize,
                Member::Categorical(c) => c[row]? as usize,
                Member::Binary(v) => {
                    let x = v[row];
                    if x.is_nan() {
                        return None;
                    }
                    x as usize
                }
            };
            idx = idx * lv.len() + code;
        }
        Some(idx)
    }

    fn cell_levels(&self, mut idx: usize) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(self.members.len());
        for (name, lv) in self.names.iter().zip(&self.levels).rev() {
            out.push((name.clone(), lv[idx % lv.len()].clone()));
            idx /= lv.len();
        }
        out.reverse();
        out
    }
}

fn resolve_group<'a>(ds: &'a PanelDataset, cols: &[String]) -> Result<Group<'a>> {
    let schema = ds.schema();
    let mut g = Group {
        members: Vec::new(),
        levels: Vec::new(),
        names: cols.to_vec(),
    };
    for c in cols {
        let invalid = |reason: &str| TreatmentError::InvalidInteraction {
            col: c.clone(),
            reason: reason.to_string(),
        };
        let def = schema.col(c).ok_or_else(|| invalid("is not a declared column"))?;
        match def.data_type {
            DataType::Categorical => {
                let levels = ds.levels(c).expect("categorical").to_vec();
                match schema.panel_colnames().iter().position(|p| p == c) {
                    Some(pos) => g.members.push(Member::Panel { pos }),
                    None => g.members.push(Member::Categorical(ds.categorical(c).expect("categorical"))),
                }
                g.levels.push(levels);
            }
            DataType::Numeric => {
                let v = ds.numeric(c).expect("numeric");
                if v.iter().any(|x| !x.is_nan() && *x != 0.0 && *x != 1.0) {
                    return Err(invalid("is numeric but not binary 0/1"));
                }
                g.members.push(Member::Binary(v));
                g.levels.push(vec!["0".into(), "1".into()]);
            }
            DataType::DateTime => return Err(invalid("is a date column")),
        }
    }
    if cols.is_empty() {
        return Err(TreatmentError::InvalidInteraction {
            col: String::new(),
            reason: "empty interaction group".into(),
        });
    }
    Ok(g)
}

/// Peers of each unit, as unit indices (empty when the focal level has no
/// entry in the map).
fn resolve_peers(ds: &PanelDataset, p: &PToPVar) -> Result<(Vec<Vec<usize>>, usize, Vec<String>)> {
    let pos = ds
        .schema()
        .panel_colnames()
        .iter()
        .position(|c| *c == p.group_col)
        .ok_or_else(|| TreatmentError::UnknownGroupColumn(p.group_col.clone()))?;
    let levels = ds.levels(&p.group_col).expect("panel columns are categorical").to_vec();
    let code = |l: &str| {
        levels
            .iter()
            .position(|x| x == l)
            .map(|c| c as u32)
            .ok_or_else(|| TreatmentError::UnknownLevel {
                col: p.group_col.clone(),
                level: l.to_string(),
            })
    };
    let mut map: HashMap<u32, Vec<u32>> = HashMap::new();
    for (focal, peers) in &p.peer_map {
        let f = code(focal)?;
        let mut seen = HashSet::new();
        let mut v = Vec::new();
        for peer in peers {
            if peer == focal {
                return Err(TreatmentError::SelfPeer(focal.clone()));
            }
            let c = code(peer)?;
            if seen.insert(c) {
                v.push(c);
            }
        }
        map.insert(f, v);
    }
    let by_key: HashMap<&[u32], usize> = (0..ds.n_units()).map(|u| (ds.unit_codes(u), u)).collect();
    let peers = (0..ds.n_units())
        .map(|u| {
            let key = ds.unit_codes(u);
            let Some(list) = map.get(&key[pos]) else {
                return Vec::new();
            };
            list.iter()
                .filter_map(|&c| {
                    let mut k = key.to_vec();
                    k[pos] = c;
                    by_key.get(k.as_slice()).copied()
                })
                .collect()
        })
        .collect();
    Ok((peers, pos, levels))
}

enum ColSource {
    Main,
    Cell { group: usize, cell: usize },
    Peer { builder: usize, focal: Option<u32> },
}

struct ColumnSpec {
    meta: ColumnMeta,
    source: ColSource,
}

/// Builds the pooled second-stage design for outcome leads
/// `min_lead..=max_lead`.
pub fn build_causal_design(
    residuals: &ResidualPanel,
    builders: &[TreatmentBuilder],
    ds: &PanelDataset,
    min_lead: usize,
    max_lead: usize,
) -> Result<CausalDesign> {
    let schema = ds.schema();
    core_treatment_set(builders, schema)?;
    let outcome = schema.outcome().to_string();
    let multi = min_lead != max_lead;

    // Resolve interaction groups and peer structures once.
    let mut groups: Vec<Group> = Vec::new();
    let mut group_ids: Vec<Vec<usize>> = Vec::new();
    let mut peers: HashMap<usize, (Vec<Vec<usize>>, usize, Vec<String>)> = HashMap::new();
    for (bi, b) in builders.iter().enumerate() {
        let mut ids = Vec::new();
        match b {
            TreatmentBuilder::Own(o) => {
                for cols in &o.interaction_levels {
                    ids.push(groups.len());
                    groups.push(resolve_group(ds, cols)?);
                }
            }
            TreatmentBuilder::Peer(p) => {
                peers.insert(bi, resolve_peers(ds, p)?);
            }
        }
        group_ids.push(ids);
    }

    // Column plan per outcome lead.
    let mut specs: Vec<ColumnSpec> = Vec::new();
    let mut used = vec![false; builders.len()];
    for tau_y in min_lead..=max_lead {
        if !residuals.has(&outcome, tau_y) {
            return Err(TreatmentError::MissingResidual {
                core: outcome.clone(),
                lead: tau_y,
            });
        }
        let suffix = if multi { format!("@{tau_y}") } else { String::new() };
        for (bi, b) in builders.iter().enumerate() {
            let t = b.treatment().to_string();
            match b {
                TreatmentBuilder::Own(o) => {
                    let (tau_d, ref_shift) = if !multi {
                        (tau_y, o.lag)
                    } else if tau_y >= min_lead + o.lag {
                        (tau_y - o.lag, 0)
                    } else {
                        continue;
                    };
                    used[bi] = true;
                    let base = if o.lag == 0 {
                        t.clone()
                    } else {
                        format!("{t}_lag{}", o.lag)
                    };
                    let meta = |name: String, kind: ColumnKind, default_pen: bool| ColumnMeta {
                        name,
                        builder: bi,
                        treatment: t.clone(),
                        lag: o.lag,
                        kind,
                        tau_d,
                        tau_y,
                        ref_shift,
                        penalized: o.penalized.unwrap_or(default_pen),
                    };
                    specs.push(ColumnSpec {
                        meta: meta(format!("{base}{suffix}"), ColumnKind::Main, false),
                        source: ColSource::Main,
                    });
                    for &gi in &group_ids[bi] {
                        let g = &groups[gi];
                        for cell in 1..g.n_cells() {
                            let lv = g.cell_levels(cell);
                            let label = lv
                                .iter()
                                .map(|(c, l)| format!("{c}={l}"))
                                .collect::<Vec<_>>()
                                .join("&");
                            specs.push(ColumnSpec {
                                meta: meta(
                                    format!("{base}*{label}{suffix}"),
                                    ColumnKind::Interaction { cell: lv },
                                    true,
                                ),
                                source: ColSource::Cell { group: gi, cell },
                            });
                        }
                    }
                }
                TreatmentBuilder::Peer(p) => {
                    used[bi] = true;
                    let levels = &peers[&bi].2;
                    let meta = |name: String, focal: Option<String>| ColumnMeta {
                        name,
                        builder: bi,
                        treatment: t.clone(),
                        lag: 0,
                        kind: ColumnKind::Peer {
                            group_col: p.group_col.clone(),
                            focal,
                        },
                        tau_d: tau_y,
                        tau_y,
                        ref_shift: 0,
                        penalized: p.penalized.unwrap_or(true),
                    };
                    if p.by_focal {
                        for focal in p.peer_map.keys() {
                            let code = levels.iter().position(|l| l == focal).expect("validated");
                            specs.push(ColumnSpec {
                                meta: meta(
                                    format!("peer:{t}|{}={focal}{suffix}", p.group_col),
                                    Some(focal.clone()),
                                ),
                                source: ColSource::Peer {
                                    builder: bi,
                                    focal: Some(code as u32),
                                },
                            });
                        }
                    } else {
                        specs.push(ColumnSpec {
                            meta: meta(format!("peer:{t}{suffix}"), None),
                            source: ColSource::Peer {
                                builder: bi,
                                focal: None,
                            },
                        });
                    }
                }
            }
        }
    }
    for (bi, b) in builders.iter().enumerate() {
        if !used[bi] {
            let lag = match b {
                TreatmentBuilder::Own(o) => o.lag,
                TreatmentBuilder::Peer(_) => 0,
            };
            return Err(TreatmentError::LagOutOfRange {
                treatment: b.treatment().to_string(),
                lag,
            });
        }
    }
    let mut seen = HashSet::new();
    for s in &specs {
        if !seen.insert(s.meta.name.clone()) {
            return Err(TreatmentError::DuplicateColumn(s.meta.name.clone()));
        }
        if !residuals.has(&s.meta.treatment, s.meta.tau_d) {
            return Err(TreatmentError::MissingResidual {
                core: s.meta.treatment.clone(),
                lead: s.meta.tau_d,
            });
        }
    }

    // Rows.
    let p = specs.len();
    let mut data: Vec<f64> = Vec::new();
    let mut keys = Vec::new();
    let mut y = Vec::new();
    let mut excluded = 0usize;
    let mut buf = vec![0.0; p];
    for tau_y in min_lead..=max_lead {
        'rows: for (u, t, a, pred) in residuals.rows(&outcome, tau_y) {
            let ti = t as i64;
            let ref_row = ds.row_at(u, ti);
            for (j, s) in specs.iter().enumerate() {
                let m = &s.meta;
                if m.tau_y != tau_y {
                    buf[j] = 0.0;
                    continue;
                }
                let own = || residuals.get(&m.treatment, m.tau_d, u, ti - m.ref_shift as i64);
                let v = match &s.source {
                    ColSource::Main => own(),
                    ColSource::Cell { group, cell } => {
                        let active = ref_row.and_then(|r| groups[*group].cell(ds, u, r));
                        match active {
                            None => None,
                            Some(c) if c == *cell => own(),
                            Some(_) => Some(0.0),
                        }
                    }
                    ColSource::Peer { builder, focal } => {
                        let (pl, pos, _) = &peers[builder];
                        let unit_level = ds.unit_codes(u)[*pos];
                        if focal.is_some_and(|f| f != unit_level) || pl[u].is_empty() {
                            Some(0.0)
                        } else {
                            let vals: Option<Vec<f64>> = pl[u]
                                .iter()
                                .map(|&q| residuals.get(&m.treatment, m.tau_d, q, ti))
                                .collect();
                            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                        }
                    }
                };
                match v {
                    Some(v) => buf[j] = v,
                    None => {
                        excluded += 1;
                        continue 'rows;
                    }
                }
            }
            data.extend_from_slice(&buf);
            keys.push(RowKey::new(u, t, tau_y));
            y.push(a - pred);
        }
    }
    if excluded > 0 {
        info!("second stage: {excluded} rows excluded for missing components");
    }
    if keys.is_empty() {
        return Err(TreatmentError::NoUsableRows);
    }
    let names = specs.iter().map(|s| s.meta.name.clone()).collect();
    let z = DesignMatrix::new(DMatrix::from_row_slice(keys.len(), p, &data), names, keys);
    Ok(CausalDesign {
        z,
        y,
        meta: specs.into_iter().map(|s| s.meta).collect(),
        excluded,
    })
}
