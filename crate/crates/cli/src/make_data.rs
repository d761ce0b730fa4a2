use std::io::Write;
use std::path::PathBuf;

use dwmt_core::data::{make_tasks, write_task_csv};

use crate::failure::{CliResult, Failure};
use crate::output::write_with;
use crate::ConfigArgs;

#[derive(clap::Args)]
pub struct MakeDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to `<out_dir>/data`.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: MakeDataArgs) -> CliResult {
    let cfg = args.config.load()?;
    let dir = args.out.unwrap_or_else(|| cfg.out_dir.join("data"));
    let hash = cfg.hash();
    let data = make_tasks(&cfg.difficulty_spec(), cfg.seed)?;
    for (i, task) in data.tasks.iter().enumerate() {
        let path = dir.join(format!("task_{}.csv", i + 1));
        write_with(&path, |w| {
            let s = &task.spec;
            writeln!(
                w,
                "# config_hash={hash} seed={} task={} classes={} sigma={} noise={}",
                cfg.seed,
                i + 1,
                s.classes,
                s.sigma,
                s.noise
            )
            .map_err(|e| Failure::output(&path, e))?;
            Ok(write_task_csv(w, task)?)
        })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
