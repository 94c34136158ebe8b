//! Finite-difference gradient checks over every layer type and a small model.

use actionflow::autodiff::GradCheckOptions;
use actionflow::cli::grad_check_suite;

fn main() -> actionflow::Result<()> {
    for (name, r) in grad_check_suite(&GradCheckOptions::default())? {
        println!("{name:16} {:5} probes  max relative error {:.2e}  {}", r.probes, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}
