//! File formats: plant models, design results, scenarios, trajectories.
//!
//! Models, results, and scenarios are TOML documents with explicit
//! dimensions and row-major nested arrays for matrices; every schema
//! violation reports the offending field path. Trajectories are CSV with a
//! fixed column order and 17-significant-digit floats, so exports are
//! bit-stable: writing, parsing, and re-writing a trajectory reproduces the
//! file byte for byte. Progress logs are JSON lines.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::errors::{Error, Result};
use crate::model::{Activation, BoxConstraints, RnnModel};
use crate::sector::SectorBound;
use crate::sim::{
    ControllerKind, FeedbackKind, InputGainWindow, OutputDisturbance, PlantPerturbation,
    Scenario, SetpointStep, StepRecord, Trajectory,
};
use crate::synthesis::{ControllerCertificate, Gains, ObserverCertificate, TerminalIngredients};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::DimensionMismatch {
            path: field.to_string(),
            expected: format!("{nrows} rows"),
            got: format!("{}", rows.len()),
        });
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(Error::DimensionMismatch {
                path: format!("{field}[{i}]"),
                expected: format!("{ncols} columns"),
                got: format!("{}", r.len()),
            });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector_to_list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

fn list_to_vector(field: &str, list: &[f64], len: usize) -> Result<DVector<f64>> {
    if list.len() != len {
        return Err(Error::DimensionMismatch {
            path: field.to_string(),
            expected: format!("{len} entries"),
            got: format!("{}", list.len()),
        });
    }
    Ok(DVector::from_column_slice(list))
}

// ---------------------------------------------------------------------------
// Model documents
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    n: usize,
    m: usize,
    p: usize,
    nu: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    b_s: Vec<Vec<f64>>,
    a_tilde: Vec<Vec<f64>>,
    b_tilde: Vec<Vec<f64>>,
    b_s_tilde: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    activations: Vec<Activation>,
}

impl ModelDoc {
    fn from_model(model: &RnnModel) -> Self {
        let (n, m, p, nu) = model.dims();
        ModelDoc {
            n,
            m,
            p,
            nu,
            a: matrix_to_rows(&model.a),
            b: matrix_to_rows(&model.b),
            b_s: matrix_to_rows(&model.b_s),
            a_tilde: matrix_to_rows(&model.a_tilde),
            b_tilde: matrix_to_rows(&model.b_tilde),
            b_s_tilde: matrix_to_rows(&model.b_s_tilde),
            c: matrix_to_rows(&model.c),
            activations: model.activations.clone(),
        }
    }

    fn into_model(self) -> Result<RnnModel> {
        if self.activations.len() != self.nu {
            return Err(Error::DimensionMismatch {
                path: "activations".to_string(),
                expected: format!("{} tags", self.nu),
                got: format!("{}", self.activations.len()),
            });
        }
        let model = RnnModel {
            a: rows_to_matrix("a", &self.a, self.n, self.n)?,
            b: rows_to_matrix("b", &self.b, self.n, self.m)?,
            b_s: rows_to_matrix("b_s", &self.b_s, self.n, self.nu)?,
            a_tilde: rows_to_matrix("a_tilde", &self.a_tilde, self.nu, self.n)?,
            b_tilde: rows_to_matrix("b_tilde", &self.b_tilde, self.nu, self.m)?,
            b_s_tilde: rows_to_matrix("b_s_tilde", &self.b_s_tilde, self.nu, self.nu)?,
            c: rows_to_matrix("c", &self.c, self.p, self.n)?,
            activations: self.activations,
        };
        model.validate_shape()?;
        Ok(model)
    }
}

fn parse_error(origin: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    }
}

/// Parse a model document; `origin` names the source in errors.
pub fn model_from_str(text: &str, origin: &str) -> Result<RnnModel> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| parse_error(origin, e))?;
    doc.into_model()
}

/// Serialize a model to its document form.
pub fn model_to_string(model: &RnnModel) -> String {
    toml::to_string_pretty(&ModelDoc::from_model(model)).expect("model serialization is total")
}

/// Load a model file.
pub fn load_model(path: &Path) -> Result<RnnModel> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    model_from_str(&text, &path.display().to_string())
}

/// Write a model file.
pub fn save_model(model: &RnnModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_string(model)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Design-result documents
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ControllerDoc {
    k: Vec<Vec<f64>>,
    k_tilde: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    s: Vec<f64>,
    lambda: Vec<f64>,
    gamma: f64,
    beta: f64,
    alpha: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TerminalDoc {
    p: Vec<Vec<f64>>,
    s: Vec<f64>,
    lambda: Vec<f64>,
    gamma: f64,
    alpha: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObserverDoc {
    l: Vec<Vec<f64>>,
    l_tilde: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    s: Vec<f64>,
    lambda: Vec<f64>,
    gamma: f64,
    contraction: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultDoc {
    model: ModelDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    controller: Option<ControllerDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    terminal: Option<TerminalDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    observer: Option<ObserverDoc>,
}

/// A design-result document: the design model plus whichever certified
/// artifacts the producing step emitted. Self-contained — verification
/// needs no other files.
#[derive(Debug, Clone)]
pub struct DesignResult {
    /// The model the designs certify.
    pub model: RnnModel,
    /// Static increment-feedback design.
    pub controller: Option<ControllerCertificate>,
    /// Terminal ingredients.
    pub terminal: Option<TerminalIngredients>,
    /// Observer design.
    pub observer: Option<ObserverCertificate>,
}

impl DesignResult {
    /// A result holding only the model (no designs yet).
    pub fn bare(model: RnnModel) -> Self {
        DesignResult {
            model,
            controller: None,
            terminal: None,
            observer: None,
        }
    }
}

/// Serialize a design result.
pub fn result_to_string(res: &DesignResult) -> String {
    let doc = ResultDoc {
        model: ModelDoc::from_model(&res.model),
        controller: res.controller.as_ref().map(|c| ControllerDoc {
            k: matrix_to_rows(&c.gains.k),
            k_tilde: matrix_to_rows(&c.gains.k_tilde),
            p: matrix_to_rows(&c.p),
            s: vector_to_list(&c.s),
            lambda: vector_to_list(&c.lambda.lambda),
            gamma: c.gamma,
            beta: c.beta,
            alpha: c.alpha,
        }),
        terminal: res.terminal.as_ref().map(|t| TerminalDoc {
            p: matrix_to_rows(&t.p),
            s: vector_to_list(&t.s),
            lambda: vector_to_list(&t.lambda.lambda),
            gamma: t.gamma,
            alpha: t.alpha,
        }),
        observer: res.observer.as_ref().map(|o| ObserverDoc {
            l: matrix_to_rows(&o.l),
            l_tilde: matrix_to_rows(&o.l_tilde),
            p: matrix_to_rows(&o.p),
            s: vector_to_list(&o.s),
            lambda: vector_to_list(&o.lambda.lambda),
            gamma: o.gamma,
            contraction: o.contraction,
        }),
    };
    toml::to_string_pretty(&doc).expect("result serialization is total")
}

/// Parse a design-result document.
pub fn result_from_str(text: &str, origin: &str) -> Result<DesignResult> {
    let doc: ResultDoc = toml::from_str(text).map_err(|e| parse_error(origin, e))?;
    let model = doc.model.into_model()?;
    let (n, m, p, nu) = model.dims();
    let n_xi = n + p;
    let controller = doc
        .controller
        .map(|c| -> Result<ControllerCertificate> {
            Ok(ControllerCertificate {
                gains: Gains {
                    k: rows_to_matrix("controller.k", &c.k, m, n_xi)?,
                    k_tilde: rows_to_matrix("controller.k_tilde", &c.k_tilde, m, nu)?,
                },
                p: rows_to_matrix("controller.p", &c.p, n_xi, n_xi)?,
                s: list_to_vector("controller.s", &c.s, nu)?,
                lambda: SectorBound {
                    lambda: list_to_vector("controller.lambda", &c.lambda, nu)?,
                },
                gamma: c.gamma,
                beta: c.beta,
                alpha: c.alpha,
            })
        })
        .transpose()?;
    let terminal = doc
        .terminal
        .map(|t| -> Result<TerminalIngredients> {
            Ok(TerminalIngredients {
                p: rows_to_matrix("terminal.p", &t.p, n_xi, n_xi)?,
                s: list_to_vector("terminal.s", &t.s, nu)?,
                lambda: SectorBound {
                    lambda: list_to_vector("terminal.lambda", &t.lambda, nu)?,
                },
                gamma: t.gamma,
                alpha: t.alpha,
            })
        })
        .transpose()?;
    let observer = doc
        .observer
        .map(|o| -> Result<ObserverCertificate> {
            Ok(ObserverCertificate {
                l: rows_to_matrix("observer.l", &o.l, n + p, p)?,
                l_tilde: rows_to_matrix("observer.l_tilde", &o.l_tilde, nu, p)?,
                p: rows_to_matrix("observer.p", &o.p, n + p, n + p)?,
                s: list_to_vector("observer.s", &o.s, nu)?,
                lambda: SectorBound {
                    lambda: list_to_vector("observer.lambda", &o.lambda, nu)?,
                },
                gamma: o.gamma,
                contraction: o.contraction,
            })
        })
        .transpose()?;
    Ok(DesignResult {
        model,
        controller,
        terminal,
        observer,
    })
}

/// Load a design-result file.
pub fn load_result(path: &Path) -> Result<DesignResult> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    result_from_str(&text, &path.display().to_string())
}

/// Write a design-result file.
pub fn save_result(res: &DesignResult, path: &Path) -> Result<()> {
    fs::write(path, result_to_string(res)).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Scenario documents
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct WindowDoc {
    start: usize,
    end: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SetpointDoc {
    at: usize,
    y_ref: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConstraintsDoc {
    u_min: Vec<f64>,
    u_max: Vec<f64>,
    y_min: Vec<f64>,
    y_max: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PerturbationDoc {
    magnitude: f64,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioDoc {
    name: String,
    /// Path of the model document, relative to the scenario file.
    model: String,
    steps: usize,
    sampling_s: f64,
    controller: String,
    feedback: String,
    #[serde(default)]
    horizon: usize,
    setpoints: Vec<SetpointDoc>,
    constraints: ConstraintsDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturbation: Option<PerturbationDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    output_disturbances: Vec<WindowDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_gain_windows: Vec<WindowDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_weight: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_weight: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    divergence_limit: Option<f64>,
}

/// Parse a scenario document. The model reference is resolved against
/// `base_dir` (usually the scenario file's directory).
pub fn scenario_from_str(text: &str, origin: &str, base_dir: &Path) -> Result<Scenario> {
    let doc: ScenarioDoc = toml::from_str(text).map_err(|e| parse_error(origin, e))?;
    let model_path: PathBuf = if Path::new(&doc.model).is_absolute() {
        PathBuf::from(&doc.model)
    } else {
        base_dir.join(&doc.model)
    };
    let model = load_model(&model_path)?;
    let (_, m, p, _) = model.dims();
    let controller = match doc.controller.as_str() {
        "static" => ControllerKind::Static,
        "nmpc" => ControllerKind::Nmpc,
        other => {
            return Err(Error::InvalidField {
                path: "controller".to_string(),
                message: format!("unknown controller kind '{other}' (static | nmpc)"),
            })
        }
    };
    let feedback = match doc.feedback.as_str() {
        "state" => FeedbackKind::StateFeedback,
        "observer" => FeedbackKind::ObserverBased,
        other => {
            return Err(Error::InvalidField {
                path: "feedback".to_string(),
                message: format!("unknown feedback kind '{other}' (state | observer)"),
            })
        }
    };
    let setpoints = doc
        .setpoints
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            Ok(SetpointStep {
                at: sp.at,
                y_ref: list_to_vector(&format!("setpoints[{i}].y_ref"), &sp.y_ref, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cons = BoxConstraints {
        u_min: list_to_vector("constraints.u_min", &doc.constraints.u_min, m)?,
        u_max: list_to_vector("constraints.u_max", &doc.constraints.u_max, m)?,
        y_min: list_to_vector("constraints.y_min", &doc.constraints.y_min, p)?,
        y_max: list_to_vector("constraints.y_max", &doc.constraints.y_max, p)?,
    };
    let output_disturbances = doc
        .output_disturbances
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let offset = w.offset.as_ref().ok_or_else(|| Error::InvalidField {
                path: format!("output_disturbances[{i}]"),
                message: "missing 'offset'".to_string(),
            })?;
            Ok(OutputDisturbance {
                start: w.start,
                end: w.end,
                offset: list_to_vector(&format!("output_disturbances[{i}].offset"), offset, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let input_gain_windows = doc
        .input_gain_windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let scale = w.scale.as_ref().ok_or_else(|| Error::InvalidField {
                path: format!("input_gain_windows[{i}]"),
                message: "missing 'scale'".to_string(),
            })?;
            Ok(InputGainWindow {
                start: w.start,
                end: w.end,
                scale: list_to_vector(&format!("input_gain_windows[{i}].scale"), scale, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_xi = model.n() + p;
    let q_weight = doc
        .q_weight
        .as_ref()
        .map(|q| rows_to_matrix("q_weight", q, n_xi, n_xi))
        .transpose()?;
    let r_weight = doc
        .r_weight
        .as_ref()
        .map(|r| rows_to_matrix("r_weight", r, m, m))
        .transpose()?;
    let x0 = doc
        .x0
        .as_ref()
        .map(|x| list_to_vector("x0", x, model.n()))
        .transpose()?;
    let scenario = Scenario {
        name: doc.name,
        model,
        steps: doc.steps,
        sampling_s: doc.sampling_s,
        setpoints,
        cons,
        controller,
        feedback,
        horizon: doc.horizon,
        q_weight,
        r_weight,
        perturbation: doc
            .perturbation
            .map(|p| PlantPerturbation {
                magnitude: p.magnitude,
                seed: p.seed,
            })
            .unwrap_or_else(PlantPerturbation::none),
        output_disturbances,
        input_gain_windows,
        x0,
        divergence_limit: doc.divergence_limit.unwrap_or(1e6),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Load a scenario file; the model reference resolves against the file's
/// directory.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    scenario_from_str(&text, &path.display().to_string(), base)
}

/// Serialize a scenario back to its document form, embedding the given
/// model reference (the model itself is a separate file).
pub fn scenario_to_string(sc: &Scenario, model_ref: &str) -> String {
    let doc = ScenarioDoc {
        name: sc.name.clone(),
        model: model_ref.to_string(),
        steps: sc.steps,
        sampling_s: sc.sampling_s,
        controller: match sc.controller {
            ControllerKind::Static => "static".to_string(),
            ControllerKind::Nmpc => "nmpc".to_string(),
        },
        feedback: match sc.feedback {
            FeedbackKind::StateFeedback => "state".to_string(),
            FeedbackKind::ObserverBased => "observer".to_string(),
        },
        horizon: sc.horizon,
        setpoints: sc
            .setpoints
            .iter()
            .map(|sp| SetpointDoc {
                at: sp.at,
                y_ref: vector_to_list(&sp.y_ref),
            })
            .collect(),
        constraints: ConstraintsDoc {
            u_min: vector_to_list(&sc.cons.u_min),
            u_max: vector_to_list(&sc.cons.u_max),
            y_min: vector_to_list(&sc.cons.y_min),
            y_max: vector_to_list(&sc.cons.y_max),
        },
        perturbation: if sc.perturbation.magnitude > 0.0 {
            Some(PerturbationDoc {
                magnitude: sc.perturbation.magnitude,
                seed: sc.perturbation.seed,
            })
        } else {
            None
        },
        output_disturbances: sc
            .output_disturbances
            .iter()
            .map(|w| WindowDoc {
                start: w.start,
                end: w.end,
                offset: Some(vector_to_list(&w.offset)),
                scale: None,
            })
            .collect(),
        input_gain_windows: sc
            .input_gain_windows
            .iter()
            .map(|w| WindowDoc {
                start: w.start,
                end: w.end,
                offset: None,
                scale: Some(vector_to_list(&w.scale)),
            })
            .collect(),
        q_weight: sc.q_weight.as_ref().map(matrix_to_rows),
        r_weight: sc.r_weight.as_ref().map(matrix_to_rows),
        x0: sc.x0.as_ref().map(vector_to_list),
        divergence_limit: Some(sc.divergence_limit),
    };
    toml::to_string_pretty(&doc).expect("scenario serialization is total")
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

/// Format a float with 17 significant digits; round-trips bit-exactly.
fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v:.16e}")
    }
}

fn parse_f64(field: &str, text: &str) -> Result<f64> {
    text.parse::<f64>().map_err(|e| Error::Parse {
        path: field.to_string(),
        message: e.to_string(),
    })
}

fn csv_header(n: usize, m: usize, p: usize) -> Vec<String> {
    let mut h = vec!["k".to_string(), "t".to_string()];
    let block = |tag: &str, len: usize, h: &mut Vec<String>| {
        for i in 0..len {
            h.push(format!("{tag}{i}"));
        }
    };
    block("x", n, &mut h);
    block("xhat", n, &mut h);
    block("dhat", p, &mut h);
    block("u", m, &mut h);
    block("du", m, &mut h);
    block("y", p, &mut h);
    block("yref", p, &mut h);
    block("xi", n + p, &mut h);
    h.push("cost".to_string());
    h.push("margin_u".to_string());
    h.push("margin_y".to_string());
    h.push("terminal_quad".to_string());
    h.push("in_region".to_string());
    h.push("solver_iterations".to_string());
    h.push("solver_kkt".to_string());
    h
}

/// Render a trajectory as CSV text with the fixed column order.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let (n, m, p) = traj.dims;
    let mut out = String::new();
    out.push_str(&csv_header(n, m, p).join(","));
    out.push('\n');
    for r in &traj.records {
        let mut fields: Vec<String> = vec![r.k.to_string(), fmt_f64(r.t)];
        let push_vec = |v: &DVector<f64>, fields: &mut Vec<String>| {
            for x in v.iter() {
                fields.push(fmt_f64(*x));
            }
        };
        push_vec(&r.x, &mut fields);
        push_vec(&r.x_hat, &mut fields);
        push_vec(&r.d_hat, &mut fields);
        push_vec(&r.u, &mut fields);
        push_vec(&r.du, &mut fields);
        push_vec(&r.y, &mut fields);
        push_vec(&r.y_ref, &mut fields);
        push_vec(&r.xi, &mut fields);
        fields.push(fmt_f64(r.cost));
        fields.push(fmt_f64(r.margin_u));
        fields.push(fmt_f64(r.margin_y));
        fields.push(fmt_f64(r.terminal_quad));
        fields.push(if r.in_region { "1".into() } else { "0".into() });
        fields.push(r.solver_iterations.to_string());
        fields.push(fmt_f64(r.solver_kkt));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write a trajectory CSV file.
pub fn save_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    fs::write(path, trajectory_to_csv(traj)).map_err(io_err(path))
}

/// Parse a trajectory CSV produced by [`trajectory_to_csv`]. The column
/// layout (and therefore the dimensions) is recovered from the header.
pub fn trajectory_from_csv(text: &str, origin: &str) -> Result<Trajectory> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: origin.to_string(),
        message: "empty file (missing header)".to_string(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    // Indexed blocks like `x0,x1,...` count toward their tag only; `xhat3`
    // or `xi1` fail the all-digits suffix test for tag `x`.
    let count = |tag: &str| {
        cols.iter()
            .filter(|c| {
                c.starts_with(tag)
                    && !c[tag.len()..].is_empty()
                    && c[tag.len()..].chars().all(|ch| ch.is_ascii_digit())
            })
            .count()
    };
    let (n, m, p) = (count("x"), count("u"), count("y"));
    let expected = csv_header(n, m, p);
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Parse {
            path: origin.to_string(),
            message: "unexpected column layout".to_string(),
        });
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expected.len() {
            return Err(Error::Parse {
                path: format!("{origin}:{}", lineno + 2),
                message: format!("expected {} fields, got {}", expected.len(), f.len()),
            });
        }
        let where_ = |i: usize| format!("{origin}:{}:{}", lineno + 2, i + 1);
        let k: usize = f[0].parse().map_err(|e: std::num::ParseIntError| Error::Parse {
            path: where_(0),
            message: e.to_string(),
        })?;
        let t = parse_f64(&where_(1), f[1])?;
        let read_vec = |start: usize, len: usize| -> Result<DVector<f64>> {
            let mut v = DVector::zeros(len);
            for i in 0..len {
                v[i] = parse_f64(&where_(start + i), f[start + i])?;
            }
            Ok(v)
        };
        let mut at = 2usize;
        let x = read_vec(at, n)?;
        at += n;
        let x_hat = read_vec(at, n)?;
        at += n;
        let d_hat = read_vec(at, p)?;
        at += p;
        let u = read_vec(at, m)?;
        at += m;
        let du = read_vec(at, m)?;
        at += m;
        let y = read_vec(at, p)?;
        at += p;
        let y_ref = read_vec(at, p)?;
        at += p;
        let xi = read_vec(at, n + p)?;
        at += n + p;
        let cost = parse_f64(&where_(at), f[at])?;
        at += 1;
        let margin_u = parse_f64(&where_(at), f[at])?;
        at += 1;
        let margin_y = parse_f64(&where_(at), f[at])?;
        at += 1;
        let terminal_quad = parse_f64(&where_(at), f[at])?;
        at += 1;
        let in_region = match f[at] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    path: where_(at),
                    message: format!("expected 0 or 1, got '{other}'"),
                })
            }
        };
        at += 1;
        let solver_iterations: usize = f[at].parse().map_err(|e: std::num::ParseIntError| {
            Error::Parse {
                path: where_(at),
                message: e.to_string(),
            }
        })?;
        at += 1;
        let solver_kkt = parse_f64(&where_(at), f[at])?;
        records.push(StepRecord {
            k,
            t,
            x,
            x_hat,
            d_hat,
            u,
            du,
            y,
            y_ref,
            xi,
            cost,
            margin_u,
            margin_y,
            terminal_quad,
            in_region,
            solver_iterations,
            solver_kkt,
        });
    }
    let sampling_s = if records.len() >= 2 {
        records[1].t - records[0].t
    } else {
        1.0
    };
    Ok(Trajectory {
        name: origin.to_string(),
        sampling_s,
        dims: (n, m, p),
        records,
    })
}

/// Load a trajectory CSV file.
pub fn load_trajectory_csv(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    trajectory_from_csv(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// JSON-lines progress log
// ---------------------------------------------------------------------------

/// Append-only JSON-lines event log: one object per line with a sequence
/// number, an event tag, and free-form fields. Sequence numbers (not wall
/// time) keep logs reproducible.
pub struct JsonLog {
    out: Box<dyn std::io::Write + Send>,
    seq: u64,
}

impl JsonLog {
    /// Create (truncate) a log file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(JsonLog {
            out: Box::new(std::io::BufWriter::new(file)),
            seq: 0,
        })
    }

    /// A log that discards everything (no `--log` flag).
    pub fn sink() -> Self {
        JsonLog {
            out: Box::new(std::io::sink()),
            seq: 0,
        }
    }

    /// Append one event.
    pub fn event(&mut self, event: &str, fields: serde_json::Value) -> Result<()> {
        let line = serde_json::json!({
            "seq": self.seq,
            "event": event,
            "fields": fields,
        });
        self.seq += 1;
        writeln!(self.out, "{line}").map_err(|source| Error::Io {
            path: "<log>".to_string(),
            source,
        })
    }

    /// Flush buffered lines.
    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|source| Error::Io {
            path: "<log>".to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{random_model, GenConfig};
    use crate::sim::{run, Designs, SetpointStep};
    use crate::synthesis::{design_controller, ControllerOptions};

    #[test]
    fn model_document_round_trips() {
        let model = random_model(&GenConfig::stable(4, 2, 2, 3, 42));
        let text = model_to_string(&model);
        let back = model_from_str(&text, "test").unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn model_parse_reports_field_paths() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 1));
        let mut doc = ModelDoc::from_model(&model);
        doc.b.pop();
        let text = toml::to_string_pretty(&doc).unwrap();
        let err = model_from_str(&text, "test").unwrap_err();
        match err {
            Error::DimensionMismatch { path, .. } => assert_eq!(path, "b"),
            other => panic!("expected dimension mismatch, got {other}"),
        }
        let err = model_from_str("n = 3", "test").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn unknown_activation_is_rejected() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 1));
        let text = model_to_string(&model).replacen("tanh", "softsign", 1);
        let err = model_from_str(&text, "test").unwrap_err();
        match err {
            Error::Parse { message, .. } => assert!(message.contains("softsign")),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn result_document_round_trips() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let cert = design_controller(&model, &ControllerOptions::default()).unwrap();
        let res = DesignResult {
            model: model.clone(),
            controller: Some(cert.clone()),
            terminal: None,
            observer: None,
        };
        let text = result_to_string(&res);
        let back = result_from_str(&text, "test").unwrap();
        assert_eq!(back.model, model);
        let c = back.controller.unwrap();
        assert_eq!(c.gains.k, cert.gains.k);
        assert_eq!(c.gains.k_tilde, cert.gains.k_tilde);
        assert_eq!(c.p, cert.p);
        assert_eq!(c.gamma, cert.gamma);
        assert!(back.terminal.is_none());
        assert!(back.observer.is_none());
    }

    #[test]
    fn empty_trajectory_exports_header_only() {
        let traj = Trajectory {
            name: "empty".to_string(),
            sampling_s: 1.0,
            dims: (3, 1, 1),
            records: Vec::new(),
        };
        let text = trajectory_to_csv(&traj);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].starts_with("k,t,x0,x1,x2,xhat0"));
        let back = trajectory_from_csv(&text, "empty").unwrap();
        assert_eq!(back.dims, (3, 1, 1));
        assert!(back.records.is_empty());
    }

    #[test]
    fn trajectory_csv_round_trips_bit_exactly() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let cert = design_controller(&model, &ControllerOptions::default()).unwrap();
        let designs = Designs {
            gains: cert.gains.clone(),
            terminal: None,
            observer: None,
            lyapunov: Some((cert.p.clone(), cert.gamma)),
        };
        let (_, _, y_ref) = model
            .steady_state(&DVector::from_element(1, 0.2), &DVector::zeros(3))
            .unwrap();
        let mut sc = crate::sim::Scenario::tracking(
            "roundtrip",
            model,
            60,
            vec![SetpointStep { at: 0, y_ref }],
            BoxConstraints::unbounded(1, 1),
            1,
        );
        sc.controller = crate::sim::ControllerKind::Static;
        sc.feedback = crate::sim::FeedbackKind::StateFeedback;
        let traj = run(&sc, &designs).unwrap();
        let text = trajectory_to_csv(&traj);
        let back = trajectory_from_csv(&text, "roundtrip").unwrap();
        assert_eq!(back.records.len(), traj.records.len());
        for (a, b) in traj.records.iter().zip(back.records.iter()) {
            // Bit-identical floats after one round trip.
            assert_eq!(a, b);
        }
        // And the re-export reproduces the file byte for byte.
        let text2 = trajectory_to_csv(&back);
        assert_eq!(text, text2);
    }

    #[test]
    fn special_floats_survive_the_csv() {
        assert_eq!(fmt_f64(f64::NAN), "NaN");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        assert!(parse_f64("t", "NaN").unwrap().is_nan());
        assert_eq!(parse_f64("t", "inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_f64("t", "-inf").unwrap(), f64::NEG_INFINITY);
        for v in [0.1 + 0.2, 1.0 / 3.0, -2.5e-308, 1.7976931348623157e308] {
            assert_eq!(parse_f64("t", &fmt_f64(v)).unwrap(), v);
        }
    }

    #[test]
    fn scenario_document_round_trips() {
        let model = random_model(&GenConfig::stable(3, 1, 1, 2, 2));
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("plant.model");
        save_model(&model, &model_path).unwrap();
        let text = format!(
            r#"
name = "demo"
model = "plant.model"
steps = 100
sampling_s = 15.0
controller = "nmpc"
feedback = "observer"
horizon = 8

[[setpoints]]
at = 0
y_ref = [0.3]

[[setpoints]]
at = 50
y_ref = [0.5]

[constraints]
u_min = [0.0]
u_max = [1.0]
y_min = [0.0]
y_max = [1.0]

[perturbation]
magnitude = 0.05
seed = 9

[[output_disturbances]]
start = 20
end = 40
offset = [0.15]

[[input_gain_windows]]
start = 60
end = 80
scale = [1.6]
"#
        );
        let sc_path = dir.path().join("demo.scenario");
        fs::write(&sc_path, &text).unwrap();
        let sc = load_scenario(&sc_path).unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.steps, 100);
        assert_eq!(sc.model, model);
        assert_eq!(sc.horizon, 8);
        assert_eq!(sc.perturbation.magnitude, 0.05);
        assert_eq!(sc.output_disturbances.len(), 1);
        assert_eq!(sc.input_gain_windows[0].scale[0], 1.6);
        // Serialize back and reload: same scenario.
        let text2 = scenario_to_string(&sc, "plant.model");
        let sc2_path = dir.path().join("demo2.scenario");
        fs::write(&sc2_path, &text2).unwrap();
        let sc2 = load_scenario(&sc2_path).unwrap();
        assert_eq!(sc.name, sc2.name);
        assert_eq!(sc.setpoints, sc2.setpoints);
        assert_eq!(sc.cons, sc2.cons);
        assert_eq!(sc.output_disturbances, sc2.output_disturbances);
        assert_eq!(sc.input_gain_windows, sc2.input_gain_windows);
    }

    #[test]
    fn json_log_emits_one_object_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.log");
        {
            let mut log = JsonLog::create(&path).unwrap();
            log.event("start", serde_json::json!({"scenario": "demo"})).unwrap();
            log.event("done", serde_json::json!({"steps": 100})).unwrap();
            log.flush().unwrap();
        }
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["seq"], 0);
        assert_eq!(first["event"], "start");
        assert_eq!(first["fields"]["scenario"], "demo");
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["seq"], 1);
    }
}
