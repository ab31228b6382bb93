//! JSON problem and gains documents, certification reports and trace export.
//!
//! Matrices are nested arrays of rows. Floats are written in shortest
//! round-trip form, so a write followed by a read is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, NetworkGraph};
use crate::plant::Plant;
use crate::simulator::SimulationTrace;
use crate::synthesis::{Certificate, NodeGains, ObserverRealization, Synthesis, SynthesisParameters};

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::Parse(format!(
            "{name}: row {} has {} entries, row 1 has {ncols}",
            bad + 1,
            rows[bad].len()
        )));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Parse(format!("{name}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

/// Like [`matrix_from_rows`], but an empty array becomes `0 × ncols`.
fn matrix_with_cols(rows: &[Vec<f64>], ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        Ok(DMatrix::zeros(0, ncols))
    } else {
        matrix_from_rows(rows, name)
    }
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector_from(v: &[f64], name: &str) -> Result<DVector<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Parse(format!("{name}: non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

/// JSON `null` stands for a non-finite value.
fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    /// 1-based
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(rename = "N")]
    pub node_count: usize,
    pub edges: Vec<EdgeSpec>,
}

impl GraphSpec {
    pub fn to_graph(&self) -> Result<NetworkGraph> {
        let mut edges = Vec::with_capacity(self.edges.len());
        for e in &self.edges {
            if e.from == 0 || e.to == 0 || e.from > self.node_count || e.to > self.node_count {
                return Err(Error::InvalidGraph(format!(
                    "edge {} -> {} outside nodes 1..{}",
                    e.from, e.to, self.node_count
                )));
            }
            if e.from == e.to {
                return Err(Error::InvalidGraph(format!("self loop on node {}", e.from)));
            }
            edges.push(Edge {
                from: e.from - 1,
                to: e.to - 1,
                weight: e.weight,
            });
        }
        NetworkGraph::from_edges(self.node_count, &edges)
    }

    pub fn from_graph(g: &NetworkGraph) -> Self {
        Self {
            node_count: g.node_count(),
            edges: g
                .edges()
                .into_iter()
                .map(|e| EdgeSpec {
                    from: e.from + 1,
                    to: e.to + 1,
                    weight: e.weight,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_safety: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_tol: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    pub node_outputs: Vec<usize>,
    pub graph: GraphSpec,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Overrides>,
}

/// A validated problem ready for synthesis.
#[derive(Clone, Debug)]
pub struct Problem {
    pub plant: Plant,
    pub graph: NetworkGraph,
    pub params: SynthesisParameters,
}

impl ProblemFile {
    pub fn into_problem(&self) -> Result<Problem> {
        let a = matrix_from_rows(&self.a, "A")?;
        let c = matrix_from_rows(&self.c, "C")?;
        let plant = Plant::new(a, c, self.node_outputs.clone())?;
        let graph = self.graph.to_graph()?;
        if graph.node_count() != plant.node_count() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes, node_outputs lists {}",
                graph.node_count(),
                plant.node_count()
            )));
        }
        let mut params = SynthesisParameters::with_alpha(self.alpha);
        if let Some(o) = &self.overrides {
            params.g_weights = o.g_weights.clone();
            if let Some(x) = o.epsilon_fraction {
                params.epsilon_fraction = x;
            }
            if let Some(x) = o.gamma_safety {
                params.gamma_safety = x;
            }
            if let Some(x) = o.rank_tol {
                params.rank_tol = x;
            }
        }
        params.resolve_g(plant.node_count())?;
        Ok(Problem { plant, graph, params })
    }

    pub fn from_parts(plant: &Plant, graph: &NetworkGraph, alpha: f64) -> Self {
        Self {
            a: matrix_to_rows(plant.a()),
            c: matrix_to_rows(plant.c()),
            node_outputs: plant.output_sizes().to_vec(),
            graph: GraphSpec::from_graph(graph),
            alpha,
            overrides: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeGainsFile {
    #[serde(rename = "N")]
    pub n_gain: Rows,
    #[serde(rename = "L")]
    pub l_gain: Rows,
    #[serde(rename = "M")]
    pub m_gain: Rows,
    #[serde(rename = "P")]
    pub p_out: Rows,
    #[serde(rename = "Q")]
    pub q_out: Rows,
    #[serde(rename = "K")]
    pub k_mat: Rows,
    #[serde(rename = "H")]
    pub h_inj: Rows,
    #[serde(rename = "Pie")]
    pub p_ie: Rows,
    #[serde(rename = "Tis")]
    pub t_is: Rows,
    pub p: usize,
    pub v: usize,
}

impl NodeGainsFile {
    pub fn from_gains(g: &NodeGains) -> Self {
        Self {
            n_gain: matrix_to_rows(&g.n_gain),
            l_gain: matrix_to_rows(&g.l_gain),
            m_gain: matrix_to_rows(&g.m_gain),
            p_out: matrix_to_rows(&g.p_out),
            q_out: matrix_to_rows(&g.q_out),
            k_mat: matrix_to_rows(&g.k_mat),
            h_inj: matrix_to_rows(&g.h_inj),
            p_ie: matrix_to_rows(&g.p_ie),
            t_is: matrix_to_rows(&g.t_is),
            p: g.p_dim(),
            v: g.v_dim(),
        }
    }

    pub fn to_gains(&self) -> Result<NodeGains> {
        let t_is = matrix_from_rows(&self.t_is, "Tis")?;
        let q_out = matrix_from_rows(&self.q_out, "Q")?;
        let n = t_is.nrows();
        let m = q_out.ncols();
        let p = n.saturating_sub(t_is.ncols());
        let g = NodeGains {
            n_gain: matrix_from_rows(&self.n_gain, "N")?,
            l_gain: matrix_with_cols(&self.l_gain, m, "L")?,
            m_gain: matrix_with_cols(&self.m_gain, n, "M")?,
            p_out: matrix_from_rows(&self.p_out, "P")?,
            q_out,
            k_mat: matrix_from_rows(&self.k_mat, "K")?,
            h_inj: matrix_with_cols(&self.h_inj, p, "H")?,
            p_ie: matrix_from_rows(&self.p_ie, "Pie")?,
            t_is,
        };
        g.check_dimensions(n, m)?;
        if g.p_dim() != self.p || g.v_dim() != self.v {
            return Err(Error::Dimension(format!(
                "declared p = {}, v = {} but matrices give p = {}, v = {}",
                self.p,
                self.v,
                g.p_dim(),
                g.v_dim()
            )));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub epsilon: f64,
    pub gamma: f64,
    pub restricted_spectral_abscissa: Option<f64>,
    pub cancellation_residual_max: f64,
    /// `null` for nodes without an LMI block.
    pub lmi_max_eigenvalues: Vec<Option<f64>>,
    #[serde(default)]
    pub lyapunov_max_eigenvalue: Option<f64>,
    #[serde(default)]
    pub invariance_residual: Option<f64>,
}

impl From<&Certificate> for CertificateFile {
    fn from(c: &Certificate) -> Self {
        Self {
            epsilon: c.epsilon,
            gamma: c.gamma,
            restricted_spectral_abscissa: finite_or_none(c.restricted_spectral_abscissa),
            cancellation_residual_max: c.cancellation_residual_max,
            lmi_max_eigenvalues: c.lmi_max_eigenvalues.iter().map(|&x| finite_or_none(x)).collect(),
            lyapunov_max_eigenvalue: finite_or_none(c.lyapunov_max_eigenvalue),
            invariance_residual: finite_or_none(c.invariance_residual),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainsFile {
    pub nodes: Vec<NodeGainsFile>,
    pub gamma: f64,
    pub epsilon: f64,
    pub r: Vec<f64>,
    pub alpha: f64,
    pub total_order: usize,
    pub certificate: CertificateFile,
}

impl GainsFile {
    pub fn from_synthesis(s: &Synthesis) -> Self {
        let r = &s.realization;
        Self {
            nodes: r.nodes.iter().map(NodeGainsFile::from_gains).collect(),
            gamma: r.gamma,
            epsilon: r.epsilon,
            r: r.r_vector.iter().copied().collect(),
            alpha: r.alpha,
            total_order: r.total_order,
            certificate: CertificateFile::from(&s.certificate),
        }
    }

    pub fn to_realization(&self) -> Result<ObserverRealization> {
        if self.nodes.is_empty() {
            return Err(Error::Parse("gains file has no nodes".into()));
        }
        if self.nodes.len() != self.r.len() {
            return Err(Error::Dimension(format!(
                "{} nodes but r has {} entries",
                self.nodes.len(),
                self.r.len()
            )));
        }
        for (name, x) in [("gamma", self.gamma), ("epsilon", self.epsilon), ("alpha", self.alpha)] {
            if !x.is_finite() {
                return Err(Error::Parse(format!("{name} is not finite")));
            }
        }
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, g)| g.to_gains().map_err(|e| Error::Parse(format!("node {}: {e}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let n = nodes[0].n();
        if nodes.iter().any(|g| g.n() != n) {
            return Err(Error::Dimension("nodes disagree on the plant order".into()));
        }
        let total_order: usize = nodes.iter().map(NodeGains::order).sum();
        if total_order != self.total_order {
            return Err(Error::Dimension(format!(
                "declared total_order {} but nodes sum to {total_order}",
                self.total_order
            )));
        }
        Ok(ObserverRealization {
            nodes,
            gamma: self.gamma,
            epsilon: self.epsilon,
            alpha: self.alpha,
            r_vector: vector_from(&self.r, "r")?,
            total_order,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_problem(path: &Path) -> Result<Problem> {
    read_json::<ProblemFile>(path)?.into_problem()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub p: usize,
    pub v: usize,
    pub order: usize,
}

/// Human- and machine-readable summary of a certified design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub total_order: usize,
    pub nodes: Vec<NodeReport>,
    pub epsilon: f64,
    pub gamma: f64,
    pub restricted_abscissa: Option<f64>,
    pub cancellation_residual: f64,
    pub lmi_pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariance_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_hat: Option<f64>,
}

impl CertificateReport {
    pub fn from_synthesis(s: &Synthesis) -> Self {
        let c = &s.certificate;
        Self {
            total_order: s.realization.total_order,
            nodes: s
                .realization
                .nodes
                .iter()
                .map(|g| NodeReport {
                    p: g.p_dim(),
                    v: g.v_dim(),
                    order: g.order(),
                })
                .collect(),
            epsilon: c.epsilon,
            gamma: c.gamma,
            restricted_abscissa: finite_or_none(c.restricted_spectral_abscissa),
            cancellation_residual: c.cancellation_residual_max,
            lmi_pass: c.lmi_max_eigenvalues.iter().all(|&l| l < 0.0),
            invariance_residual: None,
            alpha_hat: None,
        }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total observer order: {}\n", self.total_order));
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("  node {}: p = {}, v = {}, order = {}\n", i + 1, n.p, n.v, n.order));
        }
        out.push_str(&format!("epsilon: {:.6e}\n", self.epsilon));
        out.push_str(&format!("gamma: {:.6e}\n", self.gamma));
        match self.restricted_abscissa {
            Some(a) => out.push_str(&format!("restricted spectral abscissa: {a:.6e}\n")),
            None => out.push_str("restricted spectral abscissa: -inf (zero-order observers)\n"),
        }
        out.push_str(&format!("cancellation residual: {:.3e}\n", self.cancellation_residual));
        out.push_str(&format!("lmi: {}\n", if self.lmi_pass { "pass" } else { "fail" }));
        if let Some(r) = self.invariance_residual {
            out.push_str(&format!("invariance residual: {r:.3e}\n"));
        }
        if let Some(a) = self.alpha_hat {
            out.push_str(&format!("empirical rate: {a:.6}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    /// `null` when the error fell below the numerical floor.
    pub alpha_hat: Option<f64>,
    pub max_invariance_residual: f64,
    pub final_error_norms: Vec<f64>,
    pub low_confidence: bool,
}

pub fn trace_header(trace: &SimulationTrace) -> Vec<String> {
    let n = trace.x.first().map_or(0, DVector::len);
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|j| format!("x_{j}")));
    for (k, ts) in trace.t_is.iter().enumerate() {
        let node = k + 1;
        h.extend((1..=ts.ncols()).map(|j| format!("z_{node}_{j}")));
        h.extend((1..=n).map(|j| format!("xhat_{node}_{j}")));
        h.push(format!("err_norm_{node}"));
        h.push(format!("inv_res_{node}"));
    }
    h
}

pub fn write_trace_csv<W: Write>(trace: &SimulationTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trace_header(trace))?;
    for k in 0..trace.len() {
        let mut row = vec![trace.times[k].to_string()];
        row.extend(trace.x[k].iter().map(f64::to_string));
        for i in 0..trace.node_count() {
            row.extend(trace.z[k][i].iter().map(f64::to_string));
            row.extend(trace.xhat[k][i].iter().map(f64::to_string));
            row.push(trace.errors[k][i].norm().to_string());
            row.push(trace.invariance_residuals[k][i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
