use std::fs;
use std::path::Path;

use pyramid_reid::scheduler::Phase;
use pyramid_reid::trainer::{read_trace, TraceRow};

use crate::error::{CliError, CliResult};
use crate::plot::{timeline, LineChart, COMBINED, ID_ONLY, PALETTE};
use crate::CurvesArgs;

pub const QUANTITIES: [&str; 10] = [
    "l_id", "l_tp", "k_id", "k_tp", "p_id", "p_tp", "fl_id", "fl_tp", "lr", "phase",
];

const WIDTH: u32 = 800;
const HEIGHT: u32 = 300;
const LOG_FLOOR: f64 = 1e-12;

fn phase_value(phase: Phase) -> f64 {
    match phase {
        Phase::IdOnly => 0.0,
        Phase::Combined => 1.0,
    }
}

fn quantity(row: &TraceRow, name: &str) -> Option<f64> {
    Some(match name {
        "l_id" => row.l_id,
        "l_tp" => return row.l_tp,
        "k_id" => row.k_id,
        "k_tp" => row.k_tp,
        "p_id" => row.p_id,
        "p_tp" => row.p_tp,
        "fl_id" => row.fl_id,
        "fl_tp" => row.fl_tp,
        "lr" => row.lr,
        "phase" => phase_value(row.phase),
        _ => unreachable!("unknown quantity {name}"),
    })
}

fn column(rows: &[TraceRow], name: &str) -> Vec<Option<f64>> {
    rows.iter().map(|r| quantity(r, name)).collect()
}

pub fn write_tidy(rows: &[TraceRow], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tau", "quantity", "value"])?;
    for row in rows {
        let tau = row.tau.to_string();
        for name in QUANTITIES {
            let value = quantity(row, name).map(|v| v.to_string()).unwrap_or_default();
            w.write_record([tau.as_str(), name, value.as_str()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export(args: &CurvesArgs) -> CliResult<()> {
    let trace = args.trace.as_ref().ok_or_else(|| CliError::missing_flag("--trace"))?;
    let out = args.out.as_ref().ok_or_else(|| CliError::missing_flag("--out"))?;
    let file = fs::File::open(trace).map_err(|e| CliError::input(format!("--trace {}: {e}", trace.display())))?;
    let rows = read_trace(file).map_err(|e| CliError::from(e).context(format!("--trace {}", trace.display())))?;
    if rows.is_empty() {
        return Err(CliError::input(format!("--trace {}: no rows", trace.display())));
    }
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("--out {}: {e}", out.display())))?;

    write_tidy(&rows, &out.join("curves.csv"))?;
    let pair = |a: &str, b: &str| {
        LineChart::new(WIDTH, HEIGHT)
            .series(column(&rows, a), PALETTE[0])
            .series(column(&rows, b), PALETTE[1])
    };
    pair("l_id", "l_tp").render().save(out.join("losses.png"))?;
    pair("p_id", "p_tp").render().save(out.join("probability.png"))?;
    pair("fl_id", "fl_tp").log_scale(LOG_FLOOR).render().save(out.join("focal.png"))?;
    LineChart::new(WIDTH, HEIGHT)
        .series(column(&rows, "lr"), PALETTE[2])
        .render()
        .save(out.join("lr.png"))?;
    let colors: Vec<_> = rows
        .iter()
        .map(|r| match r.phase {
            Phase::IdOnly => ID_ONLY,
            Phase::Combined => COMBINED,
        })
        .collect();
    timeline(&colors, 1, 40).save(out.join("phase.png"))?;

    let switches = rows.windows(2).filter(|w| w[0].phase != w[1].phase).count();
    println!(
        "{} iterations, {} phase switches; wrote curves.csv and 5 plots to {}",
        rows.len(),
        switches,
        out.display()
    );
    Ok(())
}
