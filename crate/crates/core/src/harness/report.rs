use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{HarnessError, OverheadRecord, SetResult};

const HEADER: &str = "matrix,method,n,nodes,n_redu,precond,seed,reps,t0_s,\
iters_baseline,iters_redundancy,iters_failure,t_redundancy_s,t_failure_s,\
redundancy_overhead_pct,failure_overhead_pct,pattern_elements,redundant_elements,\
recovery_elements,max_redundant_per_node_exchange,true_rel_residual,error";

fn opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn iters(s: &Option<SetResult>) -> String {
    s.as_ref().filter(|s| s.error.is_none()).map(|s| s.iterations.to_string()).unwrap_or_default()
}

/// One CSV line per record, in the given order.
pub fn csv_table(records: &[OverheadRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        // counters of the richest set that ran
        let main = r.failure.as_ref().or(r.redundancy.as_ref()).unwrap_or(&r.baseline);
        let error = [Some(&r.baseline), r.redundancy.as_ref(), r.failure.as_ref()]
            .into_iter()
            .flatten()
            .find_map(|s| s.error.clone())
            .unwrap_or_default()
            .replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.matrix,
            r.method,
            r.n,
            r.nodes,
            r.n_redu,
            serde_json::to_value(r.precond).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            r.seed,
            r.reps,
            opt(Some(r.t0)),
            r.baseline.iterations,
            iters(&r.redundancy),
            iters(&r.failure),
            opt(r.redundancy.as_ref().map(|s| s.mean_wall_s)),
            opt(r.failure.as_ref().map(|s| s.mean_wall_s)),
            opt(r.redundancy_overhead_pct),
            opt(r.failure_overhead_pct),
            main.counters.pattern_elements,
            main.counters.redundant_elements,
            main.counters.recovery_elements,
            main.max_redundant_per_node_exchange,
            opt(Some(main.true_rel_residual)),
            error,
        );
    }
    out
}

/// Writes `results.json` and `results.csv` into `dir`, sorted by
/// (matrix, method). Returns the two paths.
pub fn emit_report(records: &[OverheadRecord], dir: &Path) -> Result<(PathBuf, PathBuf), HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut sorted: Vec<&OverheadRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.matrix, a.method).cmp(&(&b.matrix, b.method)));
    fs::create_dir_all(dir)?;
    let json = dir.join("results.json");
    let csv = dir.join("results.csv");
    fs::write(&json, serde_json::to_string_pretty(&sorted)?)?;
    let owned: Vec<OverheadRecord> = sorted.into_iter().cloned().collect();
    fs::write(&csv, csv_table(&owned))?;
    Ok((json, csv))
}
