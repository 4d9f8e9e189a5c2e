//! Shared fixtures for the benchmarks.

use spinn::config::preset;
use spinn::problems::ProblemSpec;
use spinn::training::{ResidualPath, Trainer};
use spinn::Result;

/// Allen-Cahn trainer at the benchmark model size with the given residual grid and path.
pub fn allen_cahn_trainer(mx: usize, mt: usize, path: ResidualPath) -> Result<Trainer> {
    let mut run = preset("allen_cahn")?;
    let t = run.training.as_mut().expect("training section");
    t.mx = mx;
    t.mt = mt;
    t.residual_path = path;
    let problem: ProblemSpec = run.problem_spec()?;
    let cfg = run.train_config()?;
    let ic = problem.ic_data(&cfg.ic_grid);
    Trainer::new(problem, cfg, run.init_model()?, ic)
}
