//! Command dispatch behind the binary.
//!
//! Every command consumes a scenario file (plus optional flag overrides)
//! and produces a [`ResultBundle`]: CSV tables under `tables/`, a
//! `report.json` and a `summary.txt`.  Exit status is 0 on pass, 1 on a
//! failed check and 2 on errors.

use serde_json::json;

use crate::adjoint::bsvie_residual;
use crate::driver::{DriverKind, NoiseDriver};
use crate::error::{Error, Result};
use crate::linear::LinearSpec;
use crate::lq::{
    case1_conditions, case2_conditions, solve_exhaustive, solve_normal_equations, LqSolution,
    DEFAULT_ENUMERATION_CAP,
};
use crate::mp::{check_mp_with_context, mp_value_table, prepare_context, CheckMode, MpConfig};
use crate::problem::{validate_assumptions, ControlSet, ProblemSpec, ValidationConfig};
use crate::process::AdaptedProcess;
use crate::report::{fmt_f64, CsvTable, ResultBundle};
use crate::scenario::{
    parse_scenario, DriverDesc, ModeDesc, ProblemDesc, ReferenceControl, ScenarioFile,
};
use crate::second_order::{
    build_weights, cost_hessian_weights, has_linear_state_dynamics, QuadraticWeights,
};
use crate::solver::{constant_control, eval_cost, solve_svie};
use crate::spike::{asymptotic_experiment, check_order_estimates};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Simulate,
    Adjoint,
    MpCheck,
    LqSolve,
    SpikeExp,
    EpidemicDemo,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Adjoint => "adjoint",
            Command::MpCheck => "mp-check",
            Command::LqSolve => "lq-solve",
            Command::SpikeExp => "spike-exp",
            Command::EpidemicDemo => "epidemic-demo",
        }
    }
}

/// Flag overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<String>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
    pub mode: Option<String>,
}

fn apply_overrides(scn: &mut ScenarioFile, ov: &Overrides) -> Result<()> {
    if let Some(steps) = ov.steps {
        scn.steps = steps;
    }
    if let Some(backend) = &ov.backend {
        scn.driver = match backend.as_str() {
            "tree" => DriverDesc::Tree {
                cap: crate::driver::DEFAULT_TREE_DEPTH_CAP,
            },
            "mc" => {
                let (paths, seed, degree) = match &scn.driver {
                    DriverDesc::MonteCarlo {
                        paths,
                        seed,
                        degree,
                    } => (*paths, *seed, *degree),
                    _ => (10000, 0, crate::driver::DEFAULT_REGRESSION_DEGREE),
                };
                DriverDesc::MonteCarlo {
                    paths,
                    seed,
                    degree,
                }
            }
            other => return Err(Error::invalid(format!("unknown backend `{other}`"))),
        };
    }
    if let Some(paths) = ov.paths {
        if let DriverDesc::MonteCarlo { paths: p, .. } = &mut scn.driver {
            *p = paths;
        }
    }
    if let Some(seed) = ov.seed {
        if let DriverDesc::MonteCarlo { seed: s, .. } = &mut scn.driver {
            *s = seed;
        }
    }
    if let Some(tol) = ov.tolerance {
        scn.checker.tolerance = tol;
    }
    if let Some(mode) = &ov.mode {
        scn.checker.mode = match mode.split_once(':') {
            None if mode == "full" => ModeDesc::Full,
            Some(("diagonal", k)) => ModeDesc::Diagonal(k.parse().map_err(|_| {
                Error::invalid(format!("bad diagonal sample count in `{mode}`"))
            })?),
            _ => return Err(Error::invalid(format!("unknown mode `{mode}`"))),
        };
    }
    Ok(())
}

fn sanitize(text: &str) -> String {
    text.replace([',', '\n'], ";")
}

/// Resolves the reference control named by the scenario.
fn resolve_reference(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<(AdaptedProcess, Option<LqSolution>)> {
    match &scn.checker.ubar {
        ReferenceControl::Const(v) => {
            if v.len() != spec.control_dim {
                return Err(Error::invalid(
                    "reference control dimension mismatches the problem",
                ));
            }
            Ok((constant_control(driver, v), None))
        }
        ReferenceControl::Optimal => {
            if driver.kind() != DriverKind::Tree {
                return Err(Error::invalid(
                    "optimal reference controls require the tree backend; \
                     use `ubar = const:...` on Monte Carlo",
                ));
            }
            match &scn.control_set {
                ControlSet::Finite { points } => {
                    let sol = solve_exhaustive(spec, points, driver, DEFAULT_ENUMERATION_CAP)?;
                    Ok((sol.control.clone(), Some(sol)))
                }
                ControlSet::All { .. } => {
                    let lin = lin.ok_or_else(|| {
                        Error::invalid(
                            "unconstrained optimal controls need the linear-quadratic family",
                        )
                    })?;
                    let sol = solve_normal_equations(lin, driver)?;
                    Ok((sol.control.clone(), Some(sol)))
                }
                ControlSet::Box { .. } => Err(Error::invalid(
                    "optimal reference over a box is not supported; \
                     use a finite grid of points or `ubar = const:...`",
                )),
            }
        }
    }
}

fn weights_for(
    spec: &ProblemSpec,
    xbar: &AdaptedProcess,
    ubar: &AdaptedProcess,
    driver: &NoiseDriver,
) -> Result<QuadraticWeights> {
    if has_linear_state_dynamics(spec, xbar, ubar, driver) {
        Ok(cost_hessian_weights(spec, xbar, ubar, driver))
    } else if driver.kind() == DriverKind::Tree {
        let ctx = prepare_context(spec, ubar, driver)?;
        Ok(build_weights(spec, &ctx.adjoint, xbar, ubar, driver))
    } else {
        Err(Error::invalid(
            "curvature weights for nonlinear dynamics need the tree backend",
        ))
    }
}

fn control_table(u: &AdaptedProcess, driver: &NoiseDriver) -> String {
    let m = u.dim();
    let mut header = vec!["t_index".to_string(), "node_id".to_string()];
    for c in 0..m {
        header.push(format!("u{c}"));
    }
    let mut table = CsvTable::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for i in 0..driver.grid().steps() {
        for v in 0..driver.scenarios_at(i) {
            let mut row = vec![i.to_string(), v.to_string()];
            for c in 0..m {
                row.push(fmt_f64(u.at(i, v)[c]));
            }
            table.row(&row);
        }
    }
    table.finish()
}

fn bundle_shell(command: Command, scn: &ScenarioFile, driver: &NoiseDriver) -> ResultBundle {
    ResultBundle {
        command: command.name().into(),
        scenario_name: scn.name.clone(),
        scenario_hash: scn.content_hash(),
        seed: driver.seed(),
        passed: true,
        summary: Vec::new(),
        tables: Vec::new(),
        details: json!({}),
    }
}

/// Parses the scenario text, applies overrides and runs the command.
pub fn run_command(command: Command, text: &str, overrides: &Overrides) -> Result<ResultBundle> {
    let mut scn = parse_scenario(text)?;
    apply_overrides(&mut scn, overrides)?;
    let grid = scn.build_grid()?;
    let driver = scn.build_driver(grid)?;
    let (spec, lin) = scn.build_problem(&grid)?;
    match command {
        Command::Validate => cmd_validate(&scn, &spec, lin.as_ref(), &grid, &driver),
        Command::Simulate => cmd_simulate(&scn, &spec, lin.as_ref(), &driver),
        Command::Adjoint => cmd_adjoint(&scn, &spec, lin.as_ref(), &driver),
        Command::MpCheck => cmd_mp_check(&scn, &spec, lin.as_ref(), &driver),
        Command::LqSolve => cmd_lq_solve(&scn, lin.as_ref(), &driver),
        Command::SpikeExp => cmd_spike_exp(&scn, &spec, lin.as_ref(), &driver),
        Command::EpidemicDemo => cmd_epidemic_demo(&scn, &spec, &driver),
    }
}

fn cmd_validate(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    grid: &crate::grid::TimeGrid,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let config = ValidationConfig {
        seed: driver.seed().unwrap_or(0),
        ..ValidationConfig::default()
    };
    let report = validate_assumptions(spec, grid, &config);
    if let Some(lin) = lin {
        lin.validate(grid.horizon())?;
    }
    let mut table = CsvTable::new(&["clause", "passed", "worst", "detail"]);
    for c in &report.clauses {
        table.row(&[
            c.name.clone(),
            c.passed.to_string(),
            fmt_f64(c.worst),
            sanitize(&c.detail),
        ]);
    }
    let mut bundle = bundle_shell(Command::Validate, scn, driver);
    bundle.passed = report.passed();
    bundle.summary = report
        .clauses
        .iter()
        .map(|c| format!("{}: {}", c.name, if c.passed { "pass" } else { "FAIL" }))
        .collect();
    bundle.tables.push(("validation".into(), table.finish()));
    bundle.details = json!({
        "clauses": report.clauses.iter().map(|c| json!({
            "name": c.name,
            "passed": c.passed,
            "worst": c.worst,
            "detail": c.detail,
        })).collect::<Vec<_>>(),
    });
    Ok(bundle)
}

fn cmd_simulate(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let (ubar, _) = resolve_reference(scn, spec, lin, driver)?;
    let x = solve_svie(spec, &ubar, driver)?;
    let cost = eval_cost(spec, &x, &ubar, driver);
    let n = spec.state_dim;
    let mut header = vec!["t_index".to_string(), "time".to_string()];
    for d in 0..n {
        header.push(format!("mean{d}"));
    }
    header.push("second_moment".into());
    let mut table = CsvTable::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for i in 0..=driver.grid().steps() {
        let count = driver.scenarios_at(i);
        let w = driver.scenario_weight(i);
        let mut mean = vec![0.0; n];
        let mut sq = 0.0;
        for v in 0..count {
            for d in 0..n {
                mean[d] += x.at(i, v)[d];
            }
            sq += x.at(i, v).iter().map(|a| a * a).sum::<f64>();
        }
        let mut row = vec![i.to_string(), fmt_f64(driver.grid().time(i))];
        for d in 0..n {
            row.push(fmt_f64(mean[d] * w));
        }
        row.push(fmt_f64(sq * w));
        table.row(&row);
    }
    let mut bundle = bundle_shell(Command::Simulate, scn, driver);
    bundle.summary = vec![format!("cost J = {cost}")];
    bundle.tables.push(("state".into(), table.finish()));
    bundle
        .tables
        .push(("control".into(), control_table(&ubar, driver)));
    bundle.details = json!({ "cost": cost });
    Ok(bundle)
}

fn cmd_adjoint(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let (ubar, _) = resolve_reference(scn, spec, lin, driver)?;
    let ctx = prepare_context(spec, &ubar, driver)?;
    let residual = bsvie_residual(spec, &ctx.adjoint, &ctx.xbar, &ubar, driver);
    let n = spec.state_dim;
    let steps = driver.grid().steps();

    let mut header = vec!["t_index".to_string(), "node_id".to_string()];
    for d in 0..n {
        header.push(format!("y{d}"));
    }
    let mut y_table = CsvTable::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for i in 0..steps {
        for v in 0..driver.scenarios_at(i) {
            let mut row = vec![i.to_string(), v.to_string()];
            for d in 0..n {
                row.push(fmt_f64(ctx.adjoint.y.at(i, v)[d]));
            }
            y_table.row(&row);
        }
    }
    let mut header = vec![
        "t_index".to_string(),
        "s_index".to_string(),
        "node_id".to_string(),
    ];
    for d in 0..n {
        header.push(format!("z{d}"));
    }
    let mut z_table = CsvTable::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for i in 0..steps {
        for j in 0..steps {
            for v in 0..driver.scenarios_at(j) {
                let mut row = vec![i.to_string(), j.to_string(), v.to_string()];
                for d in 0..n {
                    row.push(fmt_f64(ctx.adjoint.z.at(i, j, v)[d]));
                }
                z_table.row(&row);
            }
        }
    }
    let mut header = vec!["t_index".to_string(), "node_id".to_string()];
    for d in 0..n {
        header.push(format!("pi{d}"));
    }
    let mut pi_table = CsvTable::new(&header.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    for i in 0..steps {
        for v in 0..driver.scenarios_at(i) {
            let mut row = vec![i.to_string(), v.to_string()];
            for d in 0..n {
                row.push(fmt_f64(ctx.adjoint.pi.at(i, v)[d]));
            }
            pi_table.row(&row);
        }
    }

    let tol = scn.checker.tolerance.max(1e-12);
    let mut bundle = bundle_shell(Command::Adjoint, scn, driver);
    bundle.passed = residual <= tol.max(ctx.adjoint.residual * 10.0);
    bundle.summary = vec![
        format!("picard iterations: {}", ctx.adjoint.iterations),
        format!("picard residual: {}", ctx.adjoint.residual),
        format!("backward-equation residual: {residual}"),
    ];
    bundle.tables.push(("adjoint_y".into(), y_table.finish()));
    bundle.tables.push(("adjoint_z".into(), z_table.finish()));
    bundle.tables.push(("adjoint_pi".into(), pi_table.finish()));
    bundle.details = json!({
        "iterations": ctx.adjoint.iterations,
        "picard_residual": ctx.adjoint.residual,
        "bsvie_residual": residual,
    });
    Ok(bundle)
}

fn mp_config(scn: &ScenarioFile) -> MpConfig {
    MpConfig {
        tolerance: scn.checker.tolerance,
        mode: match scn.checker.mode {
            ModeDesc::Full => CheckMode::Full,
            ModeDesc::Diagonal(k) => CheckMode::Diagonal { max_scenarios: k },
        },
        u_grid: scn.checker.u_grid.clone(),
    }
}

fn cmd_mp_check(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let (ubar, _) = resolve_reference(scn, spec, lin, driver)?;
    let ctx = prepare_context(spec, &ubar, driver)?;
    let config = mp_config(scn);
    let report = check_mp_with_context(spec, &ubar, &ctx, &config, driver)?;

    let mut cells = CsvTable::new(&[
        "t_index",
        "node_id",
        "min_value",
        "value_at_reference",
        "violation",
    ]);
    for c in &report.cells {
        cells.row(&[
            c.t_index.to_string(),
            c.scenario.to_string(),
            fmt_f64(c.min_value),
            fmt_f64(c.value_at_reference),
            c.violation.to_string(),
        ]);
    }
    let mut heat = CsvTable::new(&["t_index", "node_id", "u", "s_value"]);
    mp_value_table(spec, &ubar, &ctx, &config, driver, |t, v, u, s| {
        heat.row(&[
            t.to_string(),
            v.to_string(),
            u.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            fmt_f64(s),
        ]);
    })?;

    let mut bundle = bundle_shell(Command::MpCheck, scn, driver);
    bundle.passed = report.passed;
    bundle.summary = vec![
        format!("cells checked: {}", report.cells.len()),
        format!("worst violation: {}", report.worst_violation),
        format!("reference deviation: {}", report.reference_deviation),
        format!("verdict: {}", if report.passed { "pass" } else { "FAIL" }),
    ];
    bundle.tables.push(("mp_cells".into(), cells.finish()));
    bundle.tables.push(("mp_heatmap".into(), heat.finish()));
    bundle.details = serde_json::to_value(&report).expect("serialisable report");
    Ok(bundle)
}

fn cmd_lq_solve(
    scn: &ScenarioFile,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let lin = lin.ok_or_else(|| {
        Error::invalid("lq-solve needs the linear-quadratic problem family")
    })?;
    let spec = lin.to_problem_spec();
    let sol = match &scn.control_set {
        ControlSet::Finite { points } => {
            solve_exhaustive(&spec, points, driver, DEFAULT_ENUMERATION_CAP)?
        }
        _ => solve_normal_equations(lin, driver)?,
    };
    let xbar = solve_svie(&spec, &sol.control, driver)?;
    let ctx = prepare_context(&spec, &sol.control, driver)?;

    let mut details = serde_json::to_value(&sol).expect("serialisable solution");
    let case1 = case1_conditions(lin, &sol, &ctx.adjoint, &xbar, &ctx.weights, driver);
    let case2 = case2_conditions(lin, &sol, &ctx.adjoint, &xbar, &ctx.weights, driver);
    let obj = details.as_object_mut().expect("object");
    match case1 {
        Ok(report) => {
            obj.insert(
                "case1".into(),
                json!({
                    "max_stationarity_residual": report.max_stationarity_residual,
                    "min_eigenvalue": report.min_eigenvalue,
                }),
            );
        }
        Err(e) => {
            obj.insert("case1".into(), json!({ "skipped": e.to_string() }));
        }
    }
    match case2 {
        Ok(report) => {
            obj.insert(
                "case2".into(),
                json!({
                    "max_stationarity_residual": report.max_stationarity_residual,
                    "min_eigenvalue": report.min_eigenvalue,
                    "min_eigenvalue_b3_variant": report.min_eigenvalue_b3_variant,
                }),
            );
        }
        Err(e) => {
            obj.insert("case2".into(), json!({ "skipped": e.to_string() }));
        }
    }

    let mut bundle = bundle_shell(Command::LqSolve, scn, driver);
    bundle.passed = sol.gradient_norm.map_or(true, |g| g < 1e-6);
    bundle.summary = vec![
        format!("method: {:?}", sol.method),
        format!("optimal cost: {}", sol.cost),
        format!(
            "gradient norm: {}",
            sol.gradient_norm.map_or("-".into(), |g| g.to_string())
        ),
    ];
    bundle
        .tables
        .push(("lq_control".into(), control_table(&sol.control, driver)));
    bundle.details = details;
    Ok(bundle)
}

fn cmd_spike_exp(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    lin: Option<&LinearSpec>,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    let (ubar, _) = resolve_reference(scn, spec, lin, driver)?;
    let xbar = solve_svie(spec, &ubar, driver)?;
    let tau = scn.checker.tau_index;
    let u = &scn.checker.spike_u;
    let widths = &scn.checker.widths;
    let with_residual = driver.scenarios_at(0) * driver.grid().steps() <= 1 << 22;
    let order =
        check_order_estimates(spec, &xbar, &ubar, tau, u, widths, with_residual, driver)?;
    let weights = weights_for(spec, &xbar, &ubar, driver)?;
    let rows = asymptotic_experiment(spec, &weights, &xbar, &ubar, tau, u, widths, driver)?;

    let mut order_table = CsvTable::new(&["width", "epsilon", "x1_sup_sq", "residual_sup_sq"]);
    for (k, &w) in order.widths.iter().enumerate() {
        order_table.row(&[
            w.to_string(),
            fmt_f64(order.epsilons[k]),
            fmt_f64(order.x1_sup_sq[k]),
            order
                .residual_sup_sq
                .as_ref()
                .map_or("-".into(), |r| fmt_f64(r[k])),
        ]);
    }
    let mut asym_table = CsvTable::new(&[
        "width",
        "epsilon",
        "h_x1",
        "h_y1",
        "limit",
        "gap_x1_y1",
        "gap_y1_limit",
    ]);
    for r in &rows {
        asym_table.row(&[
            r.width.to_string(),
            fmt_f64(r.epsilon),
            fmt_f64(r.h_x1),
            fmt_f64(r.h_y1),
            fmt_f64(r.limit),
            fmt_f64(r.gap_x1_y1),
            fmt_f64(r.gap_y1_limit),
        ]);
    }

    let mut bundle = bundle_shell(Command::SpikeExp, scn, driver);
    bundle.summary = vec![
        format!("x1 growth slope: {}", order.x1_slope),
        format!(
            "residual slope: {}",
            order
                .residual_slope
                .map_or("-".into(), |s| s.to_string())
        ),
        format!("asymptotic rows: {}", rows.len()),
    ];
    bundle.tables.push(("order".into(), order_table.finish()));
    bundle
        .tables
        .push(("asymptotic".into(), asym_table.finish()));
    bundle.details = json!({
        "order": serde_json::to_value(&order).expect("serialisable"),
        "asymptotic": serde_json::to_value(&rows).expect("serialisable"),
    });
    Ok(bundle)
}

fn cmd_epidemic_demo(
    scn: &ScenarioFile,
    spec: &ProblemSpec,
    driver: &NoiseDriver,
) -> Result<ResultBundle> {
    if !matches!(scn.problem, ProblemDesc::Epidemic { .. }) {
        return Err(Error::invalid("epidemic-demo needs the epidemic family"));
    }
    let points = match &scn.control_set {
        ControlSet::Finite { points } => points.clone(),
        other => {
            return Err(Error::invalid(format!(
                "epidemic-demo enumerates a finite vaccine policy set, got {other:?}"
            )))
        }
    };
    let sol = solve_exhaustive(spec, &points, driver, DEFAULT_ENUMERATION_CAP)?;
    let ctx = prepare_context(spec, &sol.control, driver)?;
    let config = MpConfig {
        tolerance: scn.checker.tolerance,
        mode: CheckMode::Full,
        u_grid: points.clone(),
    };
    let report = check_mp_with_context(spec, &sol.control, &ctx, &config, driver)?;
    let order = check_order_estimates(
        spec,
        &ctx.xbar,
        &sol.control,
        scn.checker.tau_index,
        &scn.checker.spike_u,
        &scn.checker.widths,
        true,
        driver,
    )?;

    let mut bundle = bundle_shell(Command::EpidemicDemo, scn, driver);
    bundle.passed = report.passed;
    bundle.summary = vec![
        format!("optimal vaccination cost: {}", sol.cost),
        format!(
            "enumerated policies: {}",
            sol.assignments_scanned.unwrap_or(0)
        ),
        format!(
            "maximum-principle check: {}",
            if report.passed { "pass" } else { "FAIL" }
        ),
        format!("x1 growth slope: {}", order.x1_slope),
    ];
    bundle
        .tables
        .push(("optimal_policy".into(), control_table(&sol.control, driver)));
    bundle.details = json!({
        "cost": sol.cost,
        "mp": serde_json::to_value(&report).expect("serialisable"),
        "order": serde_json::to_value(&order).expect("serialisable"),
    });
    Ok(bundle)
}
